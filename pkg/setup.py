from setuptools import find_packages, setup

setup(
    name="periodic_portfolio",
    version="0.1.0",
    description="Portfolio optimization under periodic evaluation of relative performance.",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    packages=find_packages(exclude=["periodic_portfolio_tests"]),
    install_requires=[
        "dagster",
        "dagster-cloud",
        "dagster-webserver",
        "numpy >= 1.22",
        "pandas",
        "pydantic >= 2.0",
        "PyYAML",
        "scipy >= 1.9",
    ],
    extras_require={"dev": ["dagster-webserver", "pytest", "black", "isort"]},
    python_requires=">=3.9,<3.13",
)

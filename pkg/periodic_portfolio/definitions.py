"""
This module defines the Dagster code location.

It includes:
- Loading all assets from the `assets` module.
- Configuring jobs and resources.
"""

import logging

from dagster import Definitions, load_assets_from_modules

from . import assets
from .jobs import all_assets_job, simulate_job, solve_job, verify_job
from .resources import all_resources

# --- Configure logging ---
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - [%(levelname)s] - %(name)s - %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)

# Load all assets from the `assets` module
all_assets = load_assets_from_modules([assets])

defs = Definitions(
    assets=[*all_assets],
    jobs=[
        all_assets_job,
        solve_job,
        simulate_job,
        verify_job,
    ],
    resources=all_resources,
)

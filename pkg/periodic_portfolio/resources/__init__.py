import logging
from pathlib import Path
from typing import Optional

from dagster import ConfigurableResource, EnvVar

from ..config import ExperimentConfig, load_config

logger = logging.getLogger(__name__)

# -- Configure paths --
DEFAULT_CONFIG_PATH = (
    Path(__file__).parent.parent.parent / "configs" / "merton_gamma1.json"
).resolve()


class ExperimentResource(ConfigurableResource):
    """
    Where an experiment's config lives and where its artifacts go.

    Attributes:
        config_path: Experiment config (.json, .yaml).
        out_dir: Directory receiving the solve, simulate and verify outputs.
        paths: Optional override of the path count.
        seed: Optional override of the seed.
    """

    config_path: str
    out_dir: str = "artifacts"
    paths: Optional[int] = None
    seed: Optional[int] = None

    def load(self) -> ExperimentConfig:
        return load_config(self.config_path).with_overrides(
            paths=self.paths, seed=self.seed
        )

    @property
    def output_path(self) -> Path:
        return Path(self.out_dir)


# -- Configure resources --
experiment_resource = ExperimentResource(
    config_path=EnvVar("PERIODIC_PORTFOLIO_CONFIG").get_value(
        str(DEFAULT_CONFIG_PATH)
    ),
    out_dir=EnvVar("PERIODIC_PORTFOLIO_OUT").get_value("artifacts"),
)

# Collection of all resources for easy import in definitions.py
all_resources = {
    "experiment": experiment_resource,
}

import copy

import pytest
from dagster import load_assets_from_modules, materialize_to_memory

from periodic_portfolio.assets import experiment
from periodic_portfolio.definitions import defs
from periodic_portfolio.exports import A_STAR_FILE, ROLLOUT_FILE, VERIFY_FILE
from periodic_portfolio.jobs import DEFAULT_RETRY_POLICY, all_assets_job, solve_job
from periodic_portfolio.resources import ExperimentResource

ASSET_NAMES = {
    "experiment_config",
    "assumption_report",
    "fixed_point_solution",
    "periodic_policy",
    "rollout_summary",
    "verification_report",
}


@pytest.fixture
def experiment_assets():
    return load_assets_from_modules([experiment])


def _resource(config_path, out_dir, **overrides) -> dict:
    return {
        "experiment": ExperimentResource(
            config_path=str(config_path), out_dir=str(out_dir), **overrides
        )
    }


def test_full_materialization(tmp_path, write_config, flat_config, experiment_assets):
    out = tmp_path / "out"
    result = materialize_to_memory(
        experiment_assets, resources=_resource(write_config(flat_config), out)
    )
    assert result.success
    assert result.output_for_node("assumption_report")["passed"]
    assert result.output_for_node("fixed_point_solution")["converged"]
    assert len(result.output_for_node("periodic_policy")) == 3
    assert result.output_for_node("rollout_summary")["route"] == "dual"
    assert result.output_for_node("verification_report")["passed"]
    for name in (A_STAR_FILE, ROLLOUT_FILE, VERIFY_FILE):
        assert (out / name).exists()


def test_assumption_failure_stops_the_run(tmp_path, write_config, flat_config, experiment_assets):
    data = copy.deepcopy(flat_config)
    data["utility"]["rho"] = 0.004
    result = materialize_to_memory(
        experiment_assets,
        resources=_resource(write_config(data), tmp_path / "out"),
        raise_on_error=False,
    )
    assert not result.success
    assert not (tmp_path / "out" / A_STAR_FILE).exists()


def test_resource_overrides(write_config, flat_config, tmp_path):
    resource = ExperimentResource(
        config_path=str(write_config(flat_config)),
        out_dir=str(tmp_path),
        paths=512,
        seed=99,
    )
    config = resource.load()
    assert config.numerics.paths == 512
    assert config.numerics.seed == 99
    assert resource.output_path == tmp_path


def test_definitions(experiment_assets):
    for name in ("solve_job", "simulate_job", "verify_job", "all_assets_job"):
        assert defs.get_job_def(name).name == name
    keys = {key.to_user_string() for asset in experiment_assets for key in asset.keys}
    assert ASSET_NAMES <= keys


def test_jobs_share_the_retry_policy():
    assert DEFAULT_RETRY_POLICY.max_retries == 2
    assert solve_job.op_retry_policy == DEFAULT_RETRY_POLICY
    assert all_assets_job.op_retry_policy == DEFAULT_RETRY_POLICY
    assert "A*" in solve_job.description

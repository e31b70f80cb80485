"""
Dagster assets of one experiment.

The lineage is config -> assumption report -> fixed point -> policy ->
rollout summary and verification report. Every asset delegates to the
workflow of the same name, so a materialization writes the same artifacts
as the command line.
"""

from typing import Any, Dict

import pandas as pd
from dagster import AssetExecutionContext, Failure, asset

from ..config import ExperimentConfig, build_experiment
from ..exports import load_solve_artifacts, policy_frame
from ..resources import ExperimentResource
from ..workflows import cmd_simulate, cmd_solve, cmd_validate, cmd_verify

GROUP_NAME = "periodic_portfolio"


@asset(group_name=GROUP_NAME)
def experiment_config(
    context: AssetExecutionContext, experiment: ExperimentResource
) -> ExperimentConfig:
    """Validated experiment config, overrides applied."""
    config = experiment.load()
    context.log.info(
        f"Loaded {config.utility.mode} experiment from {experiment.config_path} "
        f"(seed {config.numerics.seed}, {config.numerics.paths} paths)"
    )
    return config


@asset(group_name=GROUP_NAME)
def assumption_report(
    context: AssetExecutionContext,
    experiment: ExperimentResource,
    experiment_config: ExperimentConfig,
) -> Dict[str, Any]:
    """
    Standing assumption checks.

    Raises:
        Failure: If an assumption fails; retrying cannot help.
    """
    report = cmd_validate(experiment_config, experiment.output_path)
    records = report.to_records()
    context.add_output_metadata(
        {"passed": report.passed, "failures": len(report.failures)}
    )
    if not report.passed:
        raise Failure(
            description="Standing assumptions fail: "
            + ", ".join(check.name for check in report.failures),
            allow_retries=False,
        )
    return {"passed": report.passed, "checks": records}


@asset(group_name=GROUP_NAME)
def fixed_point_solution(
    context: AssetExecutionContext,
    experiment: ExperimentResource,
    experiment_config: ExperimentConfig,
    assumption_report: Dict[str, Any],
) -> Dict[str, Any]:
    """Run report of the fixed-point solve; artifacts land in ``out_dir``."""
    outcome = cmd_solve(experiment_config, experiment.output_path)
    report = outcome.report
    context.add_output_metadata(
        {
            "iterations": report["iterations"],
            "posterior_error_bound": report["posterior_error_bound"],
            "within_bounds": bool(report["within_bounds"]),
            "A_star_file": str(outcome.files["A_star"]),
        }
    )
    return report


@asset(group_name=GROUP_NAME)
def periodic_policy(
    context: AssetExecutionContext,
    experiment: ExperimentResource,
    experiment_config: ExperimentConfig,
    fixed_point_solution: Dict[str, Any],
) -> pd.DataFrame:
    """Policy table on the A* nodes, read back from the solve artifacts."""
    _, K, spec, _ = build_experiment(experiment_config)
    policy = load_solve_artifacts(experiment.output_path, spec, K).policy
    frame = policy_frame(policy)
    context.add_output_metadata({"mode": policy.mode, "rows": len(frame)})
    return frame


@asset(group_name=GROUP_NAME)
def rollout_summary(
    context: AssetExecutionContext,
    experiment: ExperimentResource,
    experiment_config: ExperimentConfig,
    fixed_point_solution: Dict[str, Any],
) -> Dict[str, Any]:
    """Objective, value estimate and D increments of the optimal rollout."""
    outcome = cmd_simulate(
        experiment_config, experiment.output_path, experiment.output_path
    )
    summary = outcome.summary
    context.add_output_metadata(
        {
            "objective": summary["objective"]["mean"],
            "objective_std_err": summary["objective"]["std_err"],
            "tail_bound": summary["tail_bound"],
        }
    )
    return summary


@asset(group_name=GROUP_NAME)
def verification_report(
    context: AssetExecutionContext,
    experiment: ExperimentResource,
    experiment_config: ExperimentConfig,
    fixed_point_solution: Dict[str, Any],
) -> Dict[str, Any]:
    """
    All verification checks of the solved experiment.

    Raises:
        Failure: If any check fails.
    """
    outcome = cmd_verify(
        experiment_config, experiment.output_path, experiment.output_path
    )
    results = {check.name: check.passed for check in outcome.checks}
    context.add_output_metadata({"passed": outcome.passed, **results})
    if not outcome.passed:
        raise Failure(
            description="Verification failed: "
            + ", ".join(check.name for check in outcome.failures),
            allow_retries=False,
        )
    return {"passed": outcome.passed, "checks": results}

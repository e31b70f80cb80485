"""
Validate, solve, simulate and verify workflows.

The CLI and the Dagster assets are thin shells over these functions; every
number they emit comes from here.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from .config import ExperimentConfig, build_experiment
from .engine.constraints import ConstraintSet
from .engine.dual import kkt_check
from .engine.errors import AssumptionViolationError
from .engine.fixedpoint import (
    FixedPointResult,
    LogFixedPointResult,
    factor_grid,
    log_fixed_point,
    solve_fixed_point,
)
from .engine.grid import GridFeedback
from .engine.market import FactorModel, ValidationReport, validate_model
from .engine.policy_sim import (
    DETERMINISTIC_ATOL,
    PeriodicPolicy,
    RolloutResult,
    build_periodic_policy,
    riskfree_partial_sum,
    rollout,
    value_bounds_check,
    verify_martingale_D,
)
from .engine.settings import SolverSettings
from .engine.utility import UtilitySpec
from .exports import (
    SUMMARY_FILE,
    VALIDATION_FILE,
    VERIFY_FILE,
    load_solve_artifacts,
    write_json,
    write_rollout,
    write_solve_artifacts,
)

logger = logging.getLogger(__name__)

# --- Constants ---
VALIDATION_SAMPLES: int = 401
N_SE: float = 3.0
CLOSED_FORM_MODES = ("power_gamma1", "log")

PathLike = Union[str, Path]


def _estimate_record(estimate) -> Dict[str, float]:
    return {"mean": float(estimate.mean), "std_err": float(estimate.std_err)}


def validation_samples(
    model: FactorModel, spec: UtilitySpec, settings: SolverSettings
) -> np.ndarray:
    """Dense samples over the factor grid's range."""
    nodes = factor_grid(model, spec, settings)
    return np.union1d(nodes, np.linspace(nodes[0], nodes[-1], VALIDATION_SAMPLES))


# --- validate ---
def cmd_validate(
    config: ExperimentConfig, out_dir: Optional[PathLike] = None
) -> ValidationReport:
    """
    Check the standing assumptions for a config.

    Args:
        config: Validated experiment config.
        out_dir: If given, validation_report.json is written there.

    Returns:
        The ValidationReport; ``passed`` decides the exit code.
    """
    model, _, spec, settings = build_experiment(config)
    report = validate_model(model, spec, validation_samples(model, spec, settings))
    if out_dir is not None:
        write_json(
            Path(out_dir) / VALIDATION_FILE,
            {"passed": report.passed, "checks": report.to_records()},
        )
    return report


# --- solve ---
@dataclass(frozen=True)
class SolveOutcome:
    result: Union[FixedPointResult, LogFixedPointResult]
    policy: PeriodicPolicy
    report: Dict[str, Any]
    files: Dict[str, Path] = field(default_factory=dict)


def _duality_records(result: FixedPointResult) -> List[Dict[str, Any]]:
    records = []
    for value in result.certificate:
        records.append(
            {
                "y": value.y,
                "primal": value.utility_primal.mean,
                "primal_std_err": value.utility_primal.std_err,
                "dual": value.utility_dual.value,
                "dual_std_err": value.utility_dual.std_err,
                "budget": value.utility_dual.budget,
                "gap": value.duality_gap,
                "gap_std_err": value.gap_std_err,
                "weak_duality": value.weak_duality_holds(N_SE),
            }
        )
    return records


def solve_report(
    config: ExperimentConfig,
    result: Union[FixedPointResult, LogFixedPointResult],
) -> Dict[str, Any]:
    """Run report of a solve; no timestamps, so reruns are byte-identical."""
    lower, upper = result.bounds
    report: Dict[str, Any] = {
        "config": config.model_dump(mode="json", exclude_none=True),
        "mode": config.utility.mode,
        "iterations": result.iterations,
        "sup_norm_steps": result.sup_norm_steps,
        "contraction_constant": result.contraction_constant,
        "posterior_error_bound": result.posterior_error_bound,
        "bounds": {"lower": lower, "upper": upper},
    }
    if isinstance(result, LogFixedPointResult):
        report.update(
            C_star=result.C_star,
            tolerance=result.posterior_error_bound,
            within_bounds=result.within_bounds(result.posterior_error_bound),
            growth=result.growth.values,
            seeds=[result.seed],
        )
        return report
    report.update(
        C_star=0.0,
        step_ratios=result.step_ratios,
        contraction_estimate=result.contraction_estimate,
        max_std_err=result.max_std_err,
        tolerance=result.tolerance,
        within_bounds=result.within_bounds(),
        converged=result.converged,
        noise_floor=result.noise_floor,
        residual=result.residual,
        seeds=result.seeds,
        duality=_duality_records(result),
    )
    return report


def cmd_solve(config: ExperimentConfig, out_dir: PathLike) -> SolveOutcome:
    """
    Solve for A*, build the periodic policy and write the solve artifacts.

    Raises:
        AssumptionViolationError: If the config fails validation.
    """
    model, K, spec, settings = build_experiment(config)
    validation = validate_model(
        model, spec, validation_samples(model, spec, settings)
    )
    if not validation.passed:
        names = ", ".join(check.name for check in validation.failures)
        raise AssumptionViolationError(f"Standing assumptions fail: {names}.")

    if spec.is_log:
        result = log_fixed_point(model, K, spec, settings)
        C_star = result.C_star
    else:
        result = solve_fixed_point(model, K, spec, settings)
        C_star = 0.0
    policy = build_periodic_policy(model, K, spec, result.A_star, settings, C_star)
    report = solve_report(config, result)
    files = write_solve_artifacts(out_dir, policy, report)
    return SolveOutcome(result, policy, report, files)


# --- simulate ---
@dataclass(frozen=True)
class SimulateOutcome:
    rollout: RolloutResult
    summary: Dict[str, Any]
    files: Dict[str, Path] = field(default_factory=dict)


def scaled_feedback(policy: PeriodicPolicy, scale: float) -> GridFeedback:
    """The policy's portfolio feedback multiplied by ``scale``."""
    if policy.feedback is None:
        raise AssumptionViolationError("The policy carries no portfolio feedback.")
    return GridFeedback(policy.feedback.y_nodes, scale * policy.feedback.values)


def rollout_summary(
    model: FactorModel,
    spec: UtilitySpec,
    settings: SolverSettings,
    policy: PeriodicPolicy,
    result: RolloutResult,
) -> Dict[str, Any]:
    x0, y0 = settings.x0, model.factor.y0
    tests = verify_martingale_D(result, N_SE)
    return {
        "route": result.route,
        "periods": result.periods,
        "paths": result.count,
        "x0": x0,
        "y0": y0,
        "objective": _estimate_record(result.objective),
        "value_estimate": _estimate_record(result.value_estimate),
        "value_at_start": float(policy.value(x0, y0)),
        "tail_bound": result.tail_bound,
        "riskfree_partial_sum": riskfree_partial_sum(
            model, spec, x0, result.periods
        ),
        "budgets": [_estimate_record(b) for b in result.budgets],
        "negative_part": result.negative_part,
        "increments": [
            {
                "period": t.period,
                "mean": t.mean,
                "std_err": t.std_err,
                "supermartingale": t.supermartingale,
                "martingale": t.martingale,
            }
            for t in tests
        ],
        "seeds": result.seeds,
    }


def cmd_simulate(
    config: ExperimentConfig,
    artifacts_dir: PathLike,
    out_dir: PathLike,
    route: str = "dual",
    policy_scale: Optional[float] = None,
) -> SimulateOutcome:
    """
    Roll the solved policy forward and write rollout.csv and summary.json.

    Args:
        config: Experiment config.
        artifacts_dir: Output directory of a solve.
        out_dir: Target directory.
        route: "dual" or "policy", see ``rollout``.
        policy_scale: Scale the portfolio feedback (e.g. 0.5 for a
            half-optimal policy); implies the policy route.
    """
    model, K, spec, settings = build_experiment(config)
    policy = load_solve_artifacts(artifacts_dir, spec, K).policy
    feedback = None if policy_scale is None else scaled_feedback(policy, policy_scale)
    result = rollout(model, K, policy, settings, route=route, feedback=feedback)
    summary = rollout_summary(model, spec, settings, policy, result)
    files = {
        "rollout": write_rollout(out_dir, result),
        "summary": write_json(Path(out_dir) / SUMMARY_FILE, summary),
    }
    return SimulateOutcome(result, summary, files)


# --- verify ---
@dataclass(frozen=True)
class CheckOutcome:
    name: str
    passed: bool
    detail: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class VerifyOutcome:
    checks: List[CheckOutcome]
    files: Dict[str, Path] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failures(self) -> List[CheckOutcome]:
        return [check for check in self.checks if not check.passed]


def _bounds_check(policy: PeriodicPolicy, report: Dict[str, Any]) -> CheckOutcome:
    lower = report["bounds"]["lower"]
    upper = report["bounds"]["upper"]
    tol = report.get("tolerance", 0.0) + DETERMINISTIC_ATOL
    values = policy.A_star.values
    passed = bool(np.all(values >= lower - tol) and np.all(values <= upper + tol))
    return CheckOutcome(
        "A* within theoretical bounds",
        passed,
        {
            "lower": lower,
            "upper": upper,
            "tolerance": tol,
            "A_min": float(values.min()),
            "A_max": float(values.max()),
        },
    )


def _kkt_outcome(
    model: FactorModel, K: ConstraintSet, policy: PeriodicPolicy
) -> CheckOutcome:
    nodes = policy.A_star.y_nodes
    kkt = kkt_check(model, K, policy.control, policy.feedback, y_nodes=nodes)
    return CheckOutcome(
        "KKT conditions of the closed-form policy",
        kkt.passed,
        {
            "max_distance": float(np.max(kkt.distance)),
            "max_complementarity": float(np.max(np.abs(kkt.complementarity))),
        },
    )


def cmd_verify(
    config: ExperimentConfig,
    artifacts_dir: PathLike,
    out_dir: PathLike,
    policy_scale: Optional[float] = None,
) -> VerifyOutcome:
    """
    Run every verification check against a solve's artifacts.

    Checks: A* inside the theoretical bounds, the estimated value inside
    the value bounds, the martingale property of D, the per-period budget
    identity, weak duality on the certified nodes and, for closed-form
    policies, the KKT conditions. With ``policy_scale`` the rollout uses the
    scaled feedback, so the martingale check is expected to fail.
    """
    model, K, spec, settings = build_experiment(config)
    artifacts = load_solve_artifacts(artifacts_dir, spec, K)
    policy, report = artifacts.policy, artifacts.report
    checks = [_bounds_check(policy, report)]

    feedback = None if policy_scale is None else scaled_feedback(policy, policy_scale)
    result = rollout(model, K, policy, settings, feedback=feedback)

    bounds = value_bounds_check(
        model, spec, settings.x0, result.value_estimate, policy.C_star, N_SE
    )
    checks.append(
        CheckOutcome(
            "value estimate within value bounds",
            bounds.passed,
            {
                "lower": bounds.lower,
                "upper": bounds.upper,
                "estimate": bounds.estimate,
                "std_err": bounds.std_err,
            },
        )
    )

    tests = verify_martingale_D(result, N_SE)
    checks.append(
        CheckOutcome(
            "D is a martingale",
            all(t.martingale for t in tests),
            {
                "means": [t.mean for t in tests],
                "std_errs": [t.std_err for t in tests],
                "strictly_negative": [t.period for t in tests if t.strictly_negative],
            },
        )
    )

    if result.budgets:
        budget_ok = [
            abs(b.mean - 1.0) <= N_SE * b.std_err + DETERMINISTIC_ATOL
            for b in result.budgets
        ]
        checks.append(
            CheckOutcome(
                "budget identity per period",
                all(budget_ok),
                {"budgets": [_estimate_record(b) for b in result.budgets]},
            )
        )

    duality = report.get("duality", [])
    if duality:
        checks.append(
            CheckOutcome(
                "weak duality on certified nodes",
                all(entry["weak_duality"] for entry in duality),
                {"gaps": [entry["gap"] for entry in duality]},
            )
        )

    if policy.mode in CLOSED_FORM_MODES and policy.feedback is not None:
        checks.append(_kkt_outcome(model, K, policy))

    outcome = VerifyOutcome(checks)
    for check in outcome.failures:
        logger.warning(f"Verification check failed: {check.name} {check.detail}")
    logger.info(
        f"Verification {'passed' if outcome.passed else 'failed'}: "
        f"{len(checks) - len(outcome.failures)}/{len(checks)} checks."
    )
    payload = {
        "passed": outcome.passed,
        "policy_scale": policy_scale,
        "checks": [
            {"name": c.name, "passed": c.passed, "detail": c.detail} for c in checks
        ],
    }
    files = {"verify_report": write_json(Path(out_dir) / VERIFY_FILE, payload)}
    return VerifyOutcome(checks, files)

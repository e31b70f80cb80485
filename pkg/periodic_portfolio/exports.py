"""
CSV and JSON artifacts of the solve, simulate and verify workflows.

Every writer is deterministic: CSVs are written by pandas with a fixed
column order and JSON documents with sorted keys, so identical inputs give
byte-identical files.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import pandas as pd

from .engine.constraints import ConstraintSet
from .engine.dual import DualControl
from .engine.errors import ConfigError
from .engine.grid import GridFeedback, ValueGrid
from .engine.policy_sim import PeriodicPolicy, RolloutResult
from .engine.utility import UtilitySpec

logger = logging.getLogger(__name__)

# --- Constants ---
A_STAR_FILE = "A_star.csv"
POLICY_FILE = "policy.csv"
RUN_REPORT_FILE = "run_report.json"
ROLLOUT_FILE = "rollout.csv"
SUMMARY_FILE = "summary.json"
VERIFY_FILE = "verify_report.json"
VALIDATION_FILE = "validation_report.json"

PathLike = Union[str, Path]


def _to_builtin(value: Any) -> Any:
    """json.dump fallback for numpy scalars and arrays."""
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_json(path: PathLike, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_to_builtin)
        f.write("\n")
    logger.info(f"Wrote {path}")
    return path


def read_json(path: PathLike) -> Dict[str, Any]:
    with open(path) as f:
        return json.load(f)


def _write_frame(path: PathLike, frame: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {path} ({len(frame)} rows)")
    return path


# --- Solve artifacts ---
def a_star_frame(A_star: ValueGrid) -> pd.DataFrame:
    return pd.DataFrame({"y": A_star.y_nodes, "A": A_star.values})


def policy_frame(policy: PeriodicPolicy) -> pd.DataFrame:
    """
    One row per node of A*: ``y, pi_1..pi_n, nu_1..nu_n, eta, lambda``.

    Controls are evaluated at the nodes, so a feedback on coarser cells
    shows up as repeated rows.
    """
    nodes = policy.A_star.y_nodes
    nu = policy.control.nu(nodes)
    n = nu.shape[1]
    if policy.feedback is not None:
        pi = policy.feedback(nodes)
    else:
        pi = np.full((nodes.size, n), np.nan)
    columns: Dict[str, Any] = {"y": nodes}
    columns.update({f"pi_{i + 1}": pi[:, i] for i in range(n)})
    columns.update({f"nu_{i + 1}": nu[:, i] for i in range(n)})
    columns["eta"] = policy.control.eta(nodes)
    columns["lambda"] = policy.lambda_grid(nodes)
    return pd.DataFrame(columns)


def policy_record(policy: PeriodicPolicy) -> Dict[str, Any]:
    """Exact controls for the run report, on their own cell nodes."""
    record: Dict[str, Any] = {
        "mode": policy.mode,
        "C_star": policy.C_star,
        "control": {
            "y_nodes": policy.control.y_nodes,
            "nu": policy.control.nu_values,
            "eta": policy.control.eta_values,
        },
    }
    if policy.feedback is not None:
        record["feedback"] = {
            "y_nodes": policy.feedback.y_nodes,
            "pi": policy.feedback.values,
        }
    return record


def write_solve_artifacts(
    out_dir: PathLike, policy: PeriodicPolicy, report: Dict[str, Any]
) -> Dict[str, Path]:
    """
    Write A_star.csv, policy.csv and run_report.json.

    Args:
        out_dir: Target directory, created if missing.
        policy: Periodic policy carrying A*.
        report: Run report; the policy record is added under "policy".

    Returns:
        Mapping of artifact name to path.
    """
    out_dir = Path(out_dir)
    return {
        "A_star": _write_frame(out_dir / A_STAR_FILE, a_star_frame(policy.A_star)),
        "policy": _write_frame(out_dir / POLICY_FILE, policy_frame(policy)),
        "run_report": write_json(
            out_dir / RUN_REPORT_FILE, {**report, "policy": policy_record(policy)}
        ),
    }


@dataclass(frozen=True)
class SolveArtifacts:
    A_star: ValueGrid
    policy: PeriodicPolicy
    report: Dict[str, Any]


def load_solve_artifacts(
    directory: PathLike, spec: UtilitySpec, K: ConstraintSet
) -> SolveArtifacts:
    """
    Read the output of a solve back into engine types.

    A* comes from A_star.csv and the multiplier from the lambda column of
    policy.csv; the controls come from the run report.

    Raises:
        ConfigError: If an artifact is missing or malformed.
    """
    directory = Path(directory)
    try:
        a_star = pd.read_csv(directory / A_STAR_FILE)
        table = pd.read_csv(directory / POLICY_FILE)
        report = read_json(directory / RUN_REPORT_FILE)
        record = report["policy"]
        A_star = ValueGrid(
            a_star["y"].to_numpy(),
            a_star["A"].to_numpy(),
            allow_negative=spec.is_log,
        )
        control = DualControl.from_nodes(
            K,
            record["control"]["y_nodes"],
            record["control"]["nu"],
            record["control"]["eta"],
        )
        feedback = None
        if "feedback" in record:
            feedback = GridFeedback(
                np.asarray(record["feedback"]["y_nodes"], dtype=np.float64),
                np.asarray(record["feedback"]["pi"], dtype=np.float64),
            )
        policy = PeriodicPolicy(
            mode=record["mode"],
            spec=spec,
            A_star=A_star,
            control=control,
            lambda_grid=ValueGrid(
                table["y"].to_numpy(), table["lambda"].to_numpy()
            ),
            feedback=feedback,
            C_star=float(record["C_star"]),
        )
    except (OSError, KeyError, ValueError) as e:
        raise ConfigError(f"Cannot load solve artifacts from '{directory}': {e}") from e
    logger.info(f"Loaded solve artifacts from {directory}")
    return SolveArtifacts(A_star, policy, report)


# --- Simulation artifacts ---
def rollout_frame(result: RolloutResult) -> pd.DataFrame:
    """
    One row per path and period: ``path, period, y, wealth, ratio, utility, D``.

    Period 0 carries the initial state with empty ratio and utility.
    """
    count, columns = result.wealth.shape
    ratio = np.column_stack([np.full(count, np.nan), result.ratios])
    utility = np.column_stack([np.full(count, np.nan), result.utilities])
    return pd.DataFrame(
        {
            "path": np.repeat(np.arange(count), columns),
            "period": np.tile(np.arange(columns), count),
            "y": result.factor.ravel(),
            "wealth": result.wealth.ravel(),
            "ratio": ratio.ravel(),
            "utility": utility.ravel(),
            "D": result.D.ravel(),
        }
    )


def write_rollout(out_dir: PathLike, result: RolloutResult) -> Path:
    return _write_frame(Path(out_dir) / ROLLOUT_FILE, rollout_frame(result))

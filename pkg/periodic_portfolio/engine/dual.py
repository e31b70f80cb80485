"""
Dual side of the one-period problem.

A DualControl fixes feedback maps nu(y) (constraint parameter, valued in the
barrier cone) and eta(y) (market completion parameter) together with the
multiplier lambda. For any such control

    E[h_A(X_tau)] <= E[Phi(lambda Z_tau / B_tau, Y_tau)] + lambda x0

for every admissible terminal wealth with initial capital x0, so the dual
value certifies any primal estimate from above.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import optimize

from .constraints import (
    ConstraintSet,
    distance_to_K,
    nu_star_log,
    nu_star_power_gamma1,
    project_barrier_cone,
    support_delta,
)
from .errors import BracketError, ModelDomainError
from .grid import GridFeedback
from .market import (
    BinnedStatistics,
    FactorModel,
    PathSet,
    binned_statistics,
    cell_nodes,
    sharpe_theta,
)
from .montecarlo import MeanEstimate, estimate_mean
from .settings import SolverSettings
from .utility import ModifiedUtility, conjugate

logger = logging.getLogger(__name__)

# --- Constants ---
LAMBDA_XTOL: float = 1e-13
LAMBDA_MAX_EXPANSIONS: int = 60
KKT_TOL: float = 1e-8
GAP_FLOOR: float = 1e-9


def theta_nu(model: FactorModel, y: ArrayLike, nu_val: ArrayLike) -> NDArray[np.float64]:
    """Sharpe ratio of the auxiliary market, ``sigma^{-1}(mu - r 1 + nu)``."""
    coeffs = model.coefficients
    scale = np.asarray(coeffs.vol_scale(y), dtype=np.float64)
    shifted = coeffs.excess(y) + np.asarray(nu_val, dtype=np.float64)
    return (shifted @ coeffs.sigma0_inv.T) / scale[..., None]


@dataclass(frozen=True)
class DualControl:
    """
    Piecewise-constant dual feedback on factor cells.

    Attributes:
        y_nodes: Cell nodes (cells split at midpoints).
        nu_values: nu per cell, shape (B, n); each row lies in K~.
        eta_values: eta per cell, shape (B,).
        delta_values: delta(nu|K) per cell, shape (B,).
        lam: Multiplier lambda > 0.
    """

    y_nodes: NDArray[np.float64]
    nu_values: NDArray[np.float64]
    eta_values: NDArray[np.float64]
    delta_values: NDArray[np.float64]
    lam: float = 1.0
    _nu: GridFeedback = field(init=False, repr=False, compare=False)
    _scalars: GridFeedback = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        nodes = np.atleast_1d(np.asarray(self.y_nodes, dtype=np.float64))
        nu = np.asarray(self.nu_values, dtype=np.float64).reshape(nodes.size, -1)
        eta = np.asarray(self.eta_values, dtype=np.float64).reshape(nodes.size)
        delta = np.asarray(self.delta_values, dtype=np.float64).reshape(nodes.size)
        if not self.lam > 0.0:
            raise ModelDomainError(f"lambda must be > 0, got {self.lam}.")
        object.__setattr__(self, "y_nodes", nodes)
        object.__setattr__(self, "nu_values", nu)
        object.__setattr__(self, "eta_values", eta)
        object.__setattr__(self, "delta_values", delta)
        object.__setattr__(self, "_nu", GridFeedback(nodes, nu))
        object.__setattr__(
            self, "_scalars", GridFeedback(nodes, np.column_stack([eta, delta]))
        )

    @classmethod
    def zero(cls, n: int, lam: float = 1.0, y_node: float = 0.0) -> "DualControl":
        return cls(np.array([y_node]), np.zeros((1, n)), np.zeros(1), np.zeros(1), lam)

    @classmethod
    def from_nodes(
        cls,
        K: ConstraintSet,
        y_nodes: ArrayLike,
        nu_values: ArrayLike,
        eta_values: Optional[ArrayLike] = None,
        lam: float = 1.0,
    ) -> "DualControl":
        """Build a control, evaluating delta(nu) and checking nu in K~."""
        nodes = np.atleast_1d(np.asarray(y_nodes, dtype=np.float64))
        nu = np.asarray(nu_values, dtype=np.float64).reshape(nodes.size, K.n)
        deltas = []
        for row in nu:
            support = support_delta(K, row)
            if not support.finite:
                raise ModelDomainError(f"nu={row} lies outside the barrier cone.")
            deltas.append(support.value)
        eta = np.zeros(nodes.size) if eta_values is None else eta_values
        return cls(nodes, nu, eta, np.array(deltas), lam)

    @property
    def bins(self) -> int:
        return int(self.y_nodes.size)

    def nu(self, y: ArrayLike) -> NDArray[np.float64]:
        return self._nu(y)

    def eta(self, y: ArrayLike) -> NDArray[np.float64]:
        return self._scalars(y)[..., 0]

    def delta(self, y: ArrayLike) -> NDArray[np.float64]:
        return self._scalars(y)[..., 1]

    def with_lambda(self, lam: float) -> "DualControl":
        return DualControl(
            self.y_nodes, self.nu_values, self.eta_values, self.delta_values, lam
        )

    def with_cell(
        self, K: ConstraintSet, index: int, nu_row: ArrayLike, eta: float
    ) -> "DualControl":
        nu = self.nu_values.copy()
        nu[index] = nu_row
        etas = self.eta_values.copy()
        etas[index] = eta
        return DualControl.from_nodes(K, self.y_nodes, nu, etas, self.lam)


@dataclass(frozen=True)
class DualEvaluation:
    """Monte Carlo estimate of the dual value and of the budget E[x* Z / B]."""

    value: float
    std_err: float
    budget: float
    paths_used: int
    budget_std_err: float = 0.0
    samples: Optional[NDArray[np.float64]] = field(default=None, repr=False)


class _DualProblem:
    """Dual value and budget of one control family on frozen statistics."""

    def __init__(self, mu: ModifiedUtility, stats: BinnedStatistics, x0: float = 1.0):
        self.mu = mu
        self.stats = stats
        self.x0 = x0

    def log_deflator(self, ctrl: DualControl) -> NDArray[np.float64]:
        return self.stats.log_deflator(
            ctrl.nu_values, ctrl.eta_values, ctrl.delta_values
        )

    def evaluate(self, ctrl: DualControl, log_d=None) -> DualEvaluation:
        if log_d is None:
            log_d = self.log_deflator(ctrl)
        deflator = np.exp(log_d)
        phi, x_star = conjugate(self.mu, ctrl.lam * deflator, self.stats.y_end)
        values = np.asarray(phi) + ctrl.lam * self.x0
        budgets = np.asarray(x_star) * deflator
        value = estimate_mean(values, self.stats.antithetic)
        budget = estimate_mean(budgets, self.stats.antithetic)
        return DualEvaluation(
            value.mean,
            value.std_err,
            budget.mean,
            self.stats.count,
            budget.std_err,
            values,
        )

    def solve_lambda(self, ctrl: DualControl, budget_target: float = 1.0) -> float:
        return multiplier_for_deflator(
            self.mu,
            self.log_deflator(ctrl),
            self.stats.y_end,
            budget_target,
            ctrl.lam,
        )


def multiplier_for_deflator(
    mu: ModifiedUtility,
    log_d: NDArray[np.float64],
    y_end: NDArray[np.float64],
    budget_target: float = 1.0,
    lam_seed: float = 1.0,
) -> float:
    """
    Root of ``E[x*(lambda D, Y) D] = budget_target`` for per-path deflators D.

    The budget is strictly decreasing in lambda; the root is bracketed by
    expanding around ``lam_seed`` and refined with Brent's method in
    log lambda.

    Raises:
        BracketError: If no sign change is found.
    """
    if budget_target <= 0.0:
        raise ModelDomainError(f"Budget target must be > 0, got {budget_target}.")
    if mu.spec.is_log:
        # x*(u) = 1 / u makes the budget identically 1 / lambda
        return 1.0 / budget_target
    deflator = np.exp(log_d)

    def gap(log_lam: float) -> float:
        _, x_star = conjugate(mu, np.exp(log_lam) * deflator, y_end)
        budget = float(np.mean(np.asarray(x_star) * deflator))
        return np.log(budget) - np.log(budget_target)

    lo, hi = np.log(lam_seed) - 1.0, np.log(lam_seed) + 1.0
    g_lo, g_hi = gap(lo), gap(hi)
    expansions = 0
    while not g_lo > 0.0 > g_hi:
        if expansions == LAMBDA_MAX_EXPANSIONS:
            raise BracketError(
                "Could not bracket the multiplier; the path set is degenerate."
            )
        width = hi - lo
        if g_lo <= 0.0:
            lo -= width
            g_lo = gap(lo)
        if g_hi >= 0.0:
            hi += width
            g_hi = gap(hi)
        expansions += 1
    root = optimize.brentq(
        gap, lo, hi, xtol=LAMBDA_XTOL, rtol=4 * np.finfo(float).eps
    )
    return float(np.exp(root))


def _problem(
    model: FactorModel,
    mu: ModifiedUtility,
    ctrl: DualControl,
    paths: PathSet,
    x0: float,
) -> _DualProblem:
    return _DualProblem(mu, binned_statistics(model, paths, ctrl.y_nodes), x0)


def dual_objective(
    model: FactorModel,
    mu: ModifiedUtility,
    ctrl: DualControl,
    paths: PathSet,
    x0: float = 1.0,
) -> DualEvaluation:
    """
    Estimate ``E[Phi(lambda Z_tau / B_tau, Y_tau)] + lambda x0``.

    Args:
        model: Factor model.
        mu: Modified utility (log mode uses the logarithmic conjugate).
        ctrl: Dual control.
        paths: Frozen path set started at the evaluation state.
        x0: Initial capital of the budget constraint.
    """
    return _problem(model, mu, ctrl, paths, x0).evaluate(ctrl)


def solve_lambda(
    model: FactorModel,
    mu: ModifiedUtility,
    ctrl: DualControl,
    paths: PathSet,
    budget_target: float = 1.0,
) -> float:
    """
    Multiplier solving the budget identity ``E[x*(lambda Z/B) Z/B] = target``.

    nu and eta are taken from ``ctrl``; its lambda only seeds the bracket.

    Raises:
        BracketError: If bracket expansion fails.
    """
    return _problem(model, mu, ctrl, paths, budget_target).solve_lambda(
        ctrl, budget_target
    )


@dataclass(frozen=True)
class DualSearchResult:
    control: DualControl
    evaluation: DualEvaluation
    sweeps: int
    converged: bool
    history: List[float] = field(default_factory=list)


def closed_form_nu(
    model: FactorModel, mu: ModifiedUtility, K: ConstraintSet, y: float
) -> NDArray[np.float64]:
    """Pointwise nu* of the closed-form cases, used as the search seed."""
    theta = sharpe_theta(model, y)
    sigma = model.sigma(y)
    if mu.spec.is_log:
        return nu_star_log(K, theta, sigma)
    return nu_star_power_gamma1(K, theta, sigma, mu.spec.alpha)


def minimize_dual(
    model: FactorModel,
    mu: ModifiedUtility,
    K: ConstraintSet,
    paths: PathSet,
    settings: SolverSettings,
    x0: float = 1.0,
    nodes: Optional[ArrayLike] = None,
) -> DualSearchResult:
    """
    Search piecewise-constant dual controls on a frozen path set.

    Cells are seeded with the closed-form nu*, eta = 0 and the budget
    multiplier. With power utility and gamma < 1 the cells are refined by
    coordinate descent: a Powell step on nu (kept in K~ by projection), a
    bounded scalar step on eta, then lambda from the budget identity. The
    gamma = 1 and log cases keep their closed forms.

    Returns:
        DualSearchResult with ``converged=False`` when the sweep cap was hit.
    """
    if nodes is None:
        nodes = cell_nodes(paths, settings.policy_bins)
    nodes = np.atleast_1d(np.asarray(nodes, dtype=np.float64))
    problem = _DualProblem(mu, binned_statistics(model, paths, nodes), x0)
    nu_seed = np.array([closed_form_nu(model, mu, K, y) for y in nodes])
    ctrl = DualControl.from_nodes(K, nodes, nu_seed)
    ctrl = ctrl.with_lambda(problem.solve_lambda(ctrl, x0))
    best = problem.evaluate(ctrl)
    history = [best.value]

    refine = not mu.spec.is_log and mu.spec.gamma < 1.0
    if not refine:
        logger.info(
            f"Dual control from closed forms: L={best.value:.6g} "
            f"(se {best.std_err:.2e}), budget={best.budget:.9f}."
        )
        return DualSearchResult(ctrl, best, 0, True, history)

    def _objective(candidate: DualControl) -> float:
        return problem.evaluate(candidate).value

    converged = False
    sweep = 0
    for sweep in range(1, settings.dual_sweeps + 1):
        start_value = best.value
        for j in range(ctrl.bins):

            def _nu_value(u: NDArray[np.float64]) -> float:
                row = project_barrier_cone(K, u)
                return _objective(ctrl.with_cell(K, j, row, ctrl.eta_values[j]))

            nu_step = optimize.minimize(
                _nu_value,
                ctrl.nu_values[j],
                method="Powell",
                options={"maxfev": settings.dual_max_evals, "xtol": 1e-8, "ftol": 1e-12},
            )
            candidate = ctrl.with_cell(
                K, j, project_barrier_cone(K, nu_step.x), ctrl.eta_values[j]
            )
            if _objective(candidate) < best.value:
                ctrl = candidate
                best = problem.evaluate(ctrl)

            eta_step = optimize.minimize_scalar(
                lambda e: _objective(ctrl.with_cell(K, j, ctrl.nu_values[j], e)),
                bounds=(-settings.eta_bound, settings.eta_bound),
                method="bounded",
                options={"maxiter": settings.dual_max_evals, "xatol": 1e-8},
            )
            candidate = ctrl.with_cell(K, j, ctrl.nu_values[j], float(eta_step.x))
            if eta_step.fun < best.value:
                ctrl = candidate
                best = problem.evaluate(ctrl)

        ctrl = ctrl.with_lambda(problem.solve_lambda(ctrl, x0))
        best = problem.evaluate(ctrl)
        history.append(best.value)
        improvement = start_value - best.value
        logger.debug(
            f"Dual sweep {sweep}: L={best.value:.9g}, improvement={improvement:.3e}."
        )
        if improvement <= settings.dual_rel_tol * max(1.0, abs(start_value)):
            converged = True
            break

    if not converged:
        logger.warning(
            f"Dual search hit the sweep cap ({settings.dual_sweeps}); "
            f"returning the best control found."
        )
    logger.info(
        f"Dual search finished after {sweep} sweep(s): L={best.value:.6g} "
        f"(se {best.std_err:.2e}), budget={best.budget:.9f}."
    )
    return DualSearchResult(ctrl, best, sweep, converged, history)


@dataclass(frozen=True)
class KKTReport:
    """Per-node feasibility and complementarity of a (policy, nu) pair."""

    y_nodes: NDArray[np.float64]
    distance: NDArray[np.float64]
    complementarity: NDArray[np.float64]
    tol: float = KKT_TOL

    @property
    def in_K(self) -> NDArray[np.bool_]:
        return self.distance <= self.tol

    @property
    def complementary(self) -> NDArray[np.bool_]:
        return np.abs(self.complementarity) <= self.tol

    @property
    def passed(self) -> bool:
        return bool(np.all(self.in_K) and np.all(self.complementary))


def kkt_check(
    model: FactorModel,
    K: ConstraintSet,
    ctrl: DualControl,
    policy,
    y_nodes: Optional[ArrayLike] = None,
    tol: float = KKT_TOL,
) -> KKTReport:
    """
    Check ``pi(y) in K`` and ``delta(nu(y)) + pi(y)^T nu(y) = 0`` per node.

    Args:
        model: Factor model; its asset count must match the dimension of K.
        K: Constraint set.
        ctrl: Dual control supplying nu(y).
        policy: Feedback map y -> pi.
        y_nodes: Nodes to check; defaults to the control's nodes.
    """
    if model.n != K.n:
        raise ModelDomainError(
            f"Constraint set has dimension {K.n}, the model has {model.n} asset(s)."
        )
    nodes = ctrl.y_nodes if y_nodes is None else np.atleast_1d(y_nodes)
    distance, residual = [], []
    for y in nodes:
        pi = np.asarray(policy(np.array(y)), dtype=np.float64).reshape(K.n)
        nu = np.asarray(ctrl.nu(np.array(y)), dtype=np.float64).reshape(K.n)
        support = support_delta(K, nu)
        distance.append(distance_to_K(K, pi))
        residual.append(support.value + pi @ nu if support.finite else np.inf)
    report = KKTReport(np.asarray(nodes, float), np.array(distance), np.array(residual), tol)
    if not report.passed:
        logger.info(
            f"KKT conditions fail at {int(np.sum(~(report.in_K & report.complementary)))} "
            f"of {nodes.size} node(s)."
        )
    return report


def weak_duality_holds(
    primal: MeanEstimate, dual: DualEvaluation, gap_std_err: Optional[float] = None, n_se: float = 3.0
) -> bool:
    """``dual >= primal - n_se * SE`` with SE from pathwise differences if given."""
    se = gap_std_err
    if se is None:
        se = float(np.hypot(primal.std_err, dual.std_err))
    floor = GAP_FLOOR * max(1.0, abs(primal.mean))
    return dual.value >= primal.mean - n_se * se - floor

"""
The dynamic-programming operator on the factor grid and its fixed point.

For power utility the value function is

    V(x, y) = e^{-rho tau gamma alpha} A*(y) x^{alpha (1 - gamma)} / alpha

where A* is the unique fixed point of

    Psi(A)(y) = alpha e^{-rho tau} sup_pi E_y[h_A(X_tau, Y_tau)],   X_0 = 1.

Psi is evaluated node by node: the sup runs over policies constant on factor
cells (projected gradient ascent on frozen paths) and the dual search of
``dual.minimize_dual`` certifies it from the other side. Logarithmic utility
has an affine operator driven by the growth-optimal rate; see
``log_fixed_point``.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .constraints import ConstraintSet, nu_star_log, project_K, support_delta
from .dual import DualControl, DualEvaluation, minimize_dual, theta_nu
from .errors import (
    AssumptionViolationError,
    ConvergenceError,
    ModelDomainError,
    WealthOverflowError,
)
from .grid import GridFeedback, ValueGrid, build_factor_grid
from .market import (
    BinnedStatistics,
    FactorModel,
    PathSet,
    SimConfig,
    binned_statistics,
    cell_nodes,
    sharpe_theta,
    simulate_factor,
    zeta,
)
from .montecarlo import MeanEstimate, derive_seed, estimate_mean
from .settings import SolverSettings
from .utility import ModifiedUtility, UtilitySpec, marginal, terminal_utility

logger = logging.getLogger(__name__)

# --- Constants ---
SWEEP_STREAM: int = 1
LOG_RATE_NODES: int = 201
NOISE_FLOOR_SE: float = 3.0
GAP_FLOOR: float = 1e-9
ARMIJO_MIN_STEP: float = 1e-12
ARMIJO_MAX_STEP: float = 1e6
SEED_SCHEDULES = ("rotate", "frozen")


# --- Period simulation helpers ---
def period_config(spec: UtilitySpec, settings: SolverSettings, seed: int) -> SimConfig:
    return SimConfig(
        horizon=spec.tau,
        count=settings.paths,
        seed=seed,
        dt=spec.tau / settings.steps_per_period,
        antithetic=settings.antithetic,
        workers=settings.workers,
    )


def factor_grid(
    model: FactorModel, spec: UtilitySpec, settings: SolverSettings
) -> NDArray[np.float64]:
    """Nodes on ``y0 +- grid_width * spread`` with the factor's natural spread."""
    return build_factor_grid(
        model.factor.y0,
        model.factor.spread(spec.tau),
        settings.grid_nodes,
        settings.grid_width,
    )


def sweep_seed(settings: SolverSettings, sweep: int) -> int:
    """Seed of Psi-sweep ``sweep`` under the configured schedule."""
    if settings.seed_schedule not in SEED_SCHEDULES:
        raise ModelDomainError(
            f"Unknown seed schedule '{settings.seed_schedule}'."
        )
    index = sweep if settings.seed_schedule == "rotate" else 0
    return derive_seed(settings.seed, SWEEP_STREAM, index)


def _path_mean(values: NDArray[np.float64], antithetic: bool) -> NDArray[np.float64]:
    # Pairs first, so antithetic contributions cancel exactly
    if antithetic and values.shape[0] % 2 == 0:
        values = values.reshape(-1, 2, *values.shape[1:]).mean(axis=1)
    return values.mean(axis=0)


# --- Primal policy search ---
@dataclass(frozen=True)
class PolicySearchResult:
    policy: GridFeedback
    estimate: MeanEstimate
    samples: NDArray[np.float64] = field(repr=False)
    iterations: int = 0
    converged: bool = True


def merton_seed(
    model: FactorModel, spec: UtilitySpec, K: ConstraintSet, y: float
) -> NDArray[np.float64]:
    """Projected myopic portfolio ``(sigma sigma^T)^{-1}(mu - r 1) / (1 - alpha)``."""
    sigma = model.sigma(y)
    excess = model.coefficients.excess(y)
    risk = 1.0 if spec.is_log else 1.0 - spec.alpha
    return project_K(K, np.linalg.solve(sigma @ sigma.T, excess) / risk)


def optimize_feedback_policy(
    mu: ModifiedUtility,
    stats: BinnedStatistics,
    K: ConstraintSet,
    settings: SolverSettings,
    seed_policy: ArrayLike,
) -> PolicySearchResult:
    """
    Maximise the sample mean of the terminal reward over cell policies.

    Projected gradient ascent with Armijo backtracking; the pathwise
    gradient of ``E[u(X)]`` in the value of cell b is
    ``E[u'(X) X d(log X)/d(pi_b)]``.

    Args:
        mu: Terminal reward (h_A, or log in log mode).
        stats: Frozen per-cell statistics.
        K: Constraint set every cell value is projected on.
        settings: Iteration limits and tolerances.
        seed_policy: Starting values, shape (B, n).
    """
    antithetic = stats.antithetic

    def _project(values: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.array([project_K(K, row) for row in values])

    def _evaluate(values: NDArray[np.float64]):
        log_x = stats.log_wealth(values)
        if np.any(np.abs(log_x) > settings.log_cap):
            raise WealthOverflowError("Candidate policy explodes on the path set.")
        samples = np.asarray(terminal_utility(mu, np.exp(log_x), stats.y_end))
        return log_x, samples

    def _gradient(values, log_x) -> NDArray[np.float64]:
        if mu.spec.is_log:
            weight = np.ones_like(log_x)
        else:
            x = np.exp(log_x)
            weight = np.asarray(marginal(mu, x, stats.y_end)) * x
        scores = weight[:, None, None] * stats.wealth_score(values)
        return _path_mean(scores, antithetic)

    pi = _project(np.asarray(seed_policy, dtype=np.float64).reshape(stats.bins, K.n))
    log_x, samples = _evaluate(pi)
    value = float(np.mean(samples))
    grad = _gradient(pi, log_x)
    step = 1.0
    converged = False
    iteration = 0
    for iteration in range(1, settings.policy_max_iter + 1):
        accepted = False
        while step >= ARMIJO_MIN_STEP:
            candidate = _project(pi + step * grad)
            move = candidate - pi
            if np.linalg.norm(move) <= settings.policy_tol:
                break
            try:
                cand_log_x, cand_samples = _evaluate(candidate)
            except WealthOverflowError:
                step *= 0.5
                continue
            cand_value = float(np.mean(cand_samples))
            model_gain = float(np.sum(grad * move)) - float(np.sum(move**2)) / (
                2.0 * step
            )
            if cand_value >= value + model_gain:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        pi, log_x, samples, value = candidate, cand_log_x, cand_samples, cand_value
        grad = _gradient(pi, log_x)
        step = min(2.0 * step, ARMIJO_MAX_STEP)

    if not converged:
        logger.debug(
            f"Policy search stopped at the iteration cap ({settings.policy_max_iter})."
        )
    estimate = estimate_mean(samples, antithetic)
    return PolicySearchResult(
        GridFeedback(stats.nodes, pi), estimate, samples, iteration, converged
    )


# --- One-period value ---
@dataclass(frozen=True)
class PeriodValue:
    """
    One node of a Psi-sweep.

    ``primal`` and ``dual`` are in operator units (``alpha e^{-rho tau}``
    times the reward, or the plain expected log-growth in log mode). The
    utility-unit estimates always satisfy ``utility_primal <= utility_dual``
    up to noise; for alpha < 0 the operator-unit order flips.
    """

    y: float
    primal: float
    primal_std_err: float
    utility_primal: MeanEstimate
    policy: GridFeedback
    dual: Optional[float] = None
    dual_std_err: Optional[float] = None
    utility_dual: Optional[DualEvaluation] = None
    gap_std_err: Optional[float] = None
    control: Optional[DualControl] = None

    @property
    def certified(self) -> bool:
        return self.utility_dual is not None

    @property
    def duality_gap(self) -> Optional[float]:
        """Dual minus primal in utility units."""
        if self.utility_dual is None:
            return None
        return self.utility_dual.value - self.utility_primal.mean

    def weak_duality_holds(self, n_se: float = 3.0) -> bool:
        if self.utility_dual is None:
            return True
        floor = GAP_FLOOR * max(1.0, abs(self.utility_primal.mean))
        return self.duality_gap >= -n_se * (self.gap_std_err or 0.0) - floor


def operator_scale(spec: UtilitySpec) -> float:
    return 1.0 if spec.is_log else spec.alpha * np.exp(-spec.rho * spec.tau)


def one_period_value(
    model: FactorModel,
    K: ConstraintSet,
    spec: UtilitySpec,
    A: ValueGrid,
    y: float,
    paths: PathSet,
    settings: SolverSettings,
    certify: bool = True,
) -> PeriodValue:
    """
    Primal and (optionally) dual value of the one-period problem at ``y``.

    Args:
        model: Factor model.
        K: Constraint set.
        spec: Preferences.
        A: Continuation function.
        y: Start level (``paths`` must start there).
        paths: Frozen paths over one period.
        settings: Numerics.
        certify: Run the dual search as well.
    """
    mu = ModifiedUtility(spec, A)
    nodes = cell_nodes(paths, settings.policy_bins)
    stats = binned_statistics(model, paths, nodes)
    seed = np.array([merton_seed(model, spec, K, node) for node in nodes])
    search = optimize_feedback_policy(mu, stats, K, settings, seed)
    scale = operator_scale(spec)
    value = PeriodValue(
        y=float(y),
        primal=scale * search.estimate.mean,
        primal_std_err=abs(scale) * search.estimate.std_err,
        utility_primal=search.estimate,
        policy=search.policy,
    )
    if not certify:
        return value

    dual = minimize_dual(model, mu, K, paths, settings, nodes=nodes)
    evaluation = dual.evaluation
    gap = estimate_mean(evaluation.samples - search.samples, stats.antithetic)
    value = PeriodValue(
        y=value.y,
        primal=value.primal,
        primal_std_err=value.primal_std_err,
        utility_primal=search.estimate,
        policy=search.policy,
        dual=scale * evaluation.value,
        dual_std_err=abs(scale) * evaluation.std_err,
        utility_dual=evaluation,
        gap_std_err=gap.std_err,
        control=dual.control,
    )
    if not value.weak_duality_holds():
        logger.warning(
            f"Weak duality violated at y={y:.4g}: primal "
            f"{search.estimate.mean:.6g} > dual {evaluation.value:.6g} "
            f"(gap se {gap.std_err:.2e})."
        )
    return value


# --- The operator Psi ---
@dataclass(frozen=True)
class PsiSweep:
    grid: ValueGrid
    values: List[PeriodValue]
    seed: int

    @property
    def max_std_err(self) -> float:
        return max(v.primal_std_err for v in self.values)


def psi_sweep(
    model: FactorModel,
    K: ConstraintSet,
    spec: UtilitySpec,
    A: ValueGrid,
    settings: SolverSettings,
    sweep: int = 0,
    certify: bool = False,
) -> PsiSweep:
    """Apply Psi node by node on the nodes of ``A``."""
    if spec.is_log:
        raise ModelDomainError("Psi is defined for power utility; use log_fixed_point.")
    seed = sweep_seed(settings, sweep)
    values = []
    for j, y in enumerate(A.y_nodes):
        paths = simulate_factor(
            model, y, period_config(spec, settings, derive_seed(seed, j))
        )
        values.append(
            one_period_value(model, K, spec, A, y, paths, settings, certify)
        )
    levels = np.maximum([v.primal for v in values], 0.0)
    return PsiSweep(A.with_values(levels), values, seed)


def apply_psi(
    model: FactorModel,
    K: ConstraintSet,
    spec: UtilitySpec,
    A: ValueGrid,
    settings: SolverSettings,
    sweep: int = 0,
) -> ValueGrid:
    """Psi(A) on the nodes of ``A``, clamped at 0; deterministic given the seed."""
    return psi_sweep(model, K, spec, A, settings, sweep).grid


def contraction_constant(model: FactorModel, spec: UtilitySpec) -> float:
    """
    ``exp(-(rho - zeta(alpha (1 - gamma))) tau)``; ``exp(-rho tau)`` in log mode.

    Raises:
        AssumptionViolationError: If the constant is not below 1.
    """
    exponent = spec.rho
    if not spec.is_log:
        exponent -= zeta(model, spec.continuation_exponent)
    c = float(np.exp(-exponent * spec.tau))
    if not c < 1.0:
        raise AssumptionViolationError(
            f"Psi is not a contraction: c = {c:.6g} >= 1 "
            f"(rho={spec.rho}, rate exponent={exponent:.6g})."
        )
    return c


def _geometric(growth: float, level: float, spec: UtilitySpec) -> float:
    # level e^{(growth - rho) tau} / (1 - e^{-(rho - growth (1 - gamma)) tau})
    discount = spec.rho - growth * (1.0 - spec.gamma)
    if discount <= 0.0:
        raise AssumptionViolationError(
            f"Bound series diverges: rho - {growth:.6g} (1 - gamma) <= 0."
        )
    return level * np.exp((growth - spec.rho) * spec.tau) / (
        1.0 - np.exp(-discount * spec.tau)
    )


def theoretical_bounds(model: FactorModel, spec: UtilitySpec) -> Tuple[float, float]:
    """
    Constant bounds ``lower <= A*(y) <= upper``.

    Power utility pairs the risk-free growth ``r_lower alpha`` with the level
    m and the growth ``zeta(alpha)`` with level 1; which pair is the lower
    bound depends on the sign of alpha. Log utility uses the rates r_lower
    and ``r_bar + M0 / 2``.
    """
    rho, tau, gamma = spec.rho, spec.tau, spec.gamma
    if spec.is_log:
        e = np.exp(rho * tau)
        weight = (e - gamma) / (e - 1.0) ** 2
        tail = np.exp(-rho * tau) / (1.0 - np.exp(-rho * tau))
        lower = weight * model.r_lower * tau + (model.m - rho * tau * gamma) * tail
        upper = (
            weight * (model.r_bar + 0.5 * model.M0) * tau
            + (1.0 - rho * tau * gamma) * tail
        )
        return float(lower), float(upper)

    riskfree_growth = model.r_lower * spec.alpha
    if spec.alpha > 0.0:
        return (
            float(_geometric(riskfree_growth, model.m, spec)),
            float(_geometric_zeta(model, spec, 1.0)),
        )
    return (
        float(_geometric_zeta(model, spec, model.m)),
        float(_geometric(riskfree_growth, 1.0, spec)),
    )


def _geometric_zeta(model: FactorModel, spec: UtilitySpec, level: float) -> float:
    # Growth zeta(alpha) in the numerator, zeta(alpha (1 - gamma)) in the series
    discount = spec.rho - zeta(model, spec.continuation_exponent)
    if discount <= 0.0:
        raise AssumptionViolationError("rho <= zeta(alpha (1 - gamma)).")
    return level * np.exp((zeta(model, spec.alpha) - spec.rho) * spec.tau) / (
        1.0 - np.exp(-discount * spec.tau)
    )


# --- Banach iteration ---
@dataclass(frozen=True)
class FixedPointResult:
    """
    Outcome of the fixed-point iteration.

    ``posterior_error_bound`` is ``d(A_k, A_{k-1}) c / (1 - c)`` for the last
    step. ``noise_floor`` marks a stop because the steps fell below the Monte
    Carlo noise before the tolerance was reached.
    """

    A_star: ValueGrid
    iterations: int
    sup_norm_steps: List[float]
    step_ratios: List[float]
    contraction_estimate: float
    contraction_constant: float
    posterior_error_bound: float
    bounds: Tuple[float, float]
    max_std_err: float
    converged: bool
    noise_floor: bool = False
    seeds: List[int] = field(default_factory=list)
    certificate: List[PeriodValue] = field(default_factory=list, repr=False)
    residual: Optional[float] = None

    @property
    def tolerance(self) -> float:
        """Widening applied to bound checks: a-posteriori error plus 3 SE."""
        return self.posterior_error_bound + NOISE_FLOOR_SE * self.max_std_err

    def within_bounds(self) -> bool:
        lower, upper = self.bounds
        values = self.A_star.values
        tol = self.tolerance
        return bool(np.all(values >= lower - tol) and np.all(values <= upper + tol))


def solve_fixed_point(
    model: FactorModel,
    K: ConstraintSet,
    spec: UtilitySpec,
    settings: SolverSettings,
    start: str = "lower",
    nodes: Optional[ArrayLike] = None,
) -> FixedPointResult:
    """
    Iterate ``A_{k+1} = Psi(A_k)`` from a constant theoretical bound.

    Stops when ``d(A_{k+1}, A_k) c / (1 - c) <= tol`` or when the step is
    within 3 standard errors of the Monte Carlo noise. The final iterate is
    re-evaluated with the dual search when ``settings.certify`` is set.

    Args:
        start: "lower" or "upper" constant bound as the initial iterate.
        nodes: Factor grid; defaults to ``factor_grid``.

    Raises:
        ConvergenceError: If ``settings.max_iterations`` is exhausted.
    """
    if start not in ("lower", "upper"):
        raise ModelDomainError(f"start must be 'lower' or 'upper', got '{start}'.")
    c = contraction_constant(model, spec)
    lower, upper = theoretical_bounds(model, spec)
    y_nodes = factor_grid(model, spec, settings) if nodes is None else nodes
    A = ValueGrid.constant(y_nodes, lower if start == "lower" else upper)
    logger.info(
        f"Fixed-point iteration on {A.y_nodes.size} node(s): c={c:.6f}, "
        f"bounds=[{lower:.6g}, {upper:.6g}], start={start}."
    )

    steps: List[float] = []
    seeds: List[int] = []
    converged = noise_floor = False
    max_se = 0.0
    for k in range(settings.max_iterations):
        sweep = psi_sweep(model, K, spec, A, settings, sweep=k)
        seeds.append(sweep.seed)
        step = sweep.grid.distance(A)
        steps.append(step)
        max_se = sweep.max_std_err
        A = sweep.grid
        logger.debug(
            f"Sweep {k + 1}: step={step:.3e}, max se={max_se:.2e}, "
            f"A in [{A.inf:.6g}, {A.sup:.6g}]."
        )
        if step * c / (1.0 - c) <= settings.tol:
            converged = True
            break
        if max_se > 0.0 and step <= NOISE_FLOOR_SE * max_se:
            noise_floor = True
            logger.warning(
                f"Steps reached the Monte Carlo noise floor after {k + 1} sweep(s) "
                f"(step {step:.3e}, se {max_se:.2e}) before the tolerance "
                f"{settings.tol:.1e}."
            )
            break
    else:
        raise ConvergenceError(
            f"Fixed-point iteration did not converge in "
            f"{settings.max_iterations} sweeps (last step {steps[-1]:.3e})."
        )

    ratios = [b / a for a, b in zip(steps[:-1], steps[1:]) if a > 0.0]
    estimate = max(ratios) if ratios else 0.0
    certificate: List[PeriodValue] = []
    residual = None
    if settings.certify:
        final = psi_sweep(
            model, K, spec, A, settings, sweep=len(steps), certify=True
        )
        certificate = final.values
        residual = final.grid.distance(A)
        seeds.append(final.seed)
    logger.info(
        f"Fixed point after {len(steps)} sweep(s): A* in [{A.inf:.6g}, {A.sup:.6g}], "
        f"posterior error {steps[-1] * c / (1.0 - c):.3e}."
    )
    return FixedPointResult(
        A_star=A,
        iterations=len(steps),
        sup_norm_steps=steps,
        step_ratios=ratios,
        contraction_estimate=estimate,
        contraction_constant=c,
        posterior_error_bound=steps[-1] * c / (1.0 - c),
        bounds=(lower, upper),
        max_std_err=max_se,
        converged=converged,
        noise_floor=noise_floor,
        seeds=seeds,
        certificate=certificate,
        residual=residual,
    )


# --- Logarithmic utility ---
def log_growth_rate(
    model: FactorModel, K: ConstraintSet, y: ArrayLike
) -> NDArray[np.float64]:
    """Growth-optimal rate ``r + delta(nu*) + |theta^{nu*}|^2 / 2`` per level."""
    ys = np.atleast_1d(np.asarray(y, dtype=np.float64))
    rates = np.empty(ys.size)
    for i, level in enumerate(ys):
        nu = nu_star_log(K, sharpe_theta(model, level), model.sigma(level))
        shifted = theta_nu(model, level, nu)
        rates[i] = (
            model.r(level) + support_delta(K, nu).value + 0.5 * shifted @ shifted
        )
    return rates


@dataclass(frozen=True)
class LogFixedPointResult:
    """
    ``V(x, y) = A*(y) + C* log x`` for logarithmic utility.

    ``growth`` holds ``sup E[log X_tau]`` per node.
    """

    A_star: ValueGrid
    C_star: float
    growth: ValueGrid
    iterations: int
    sup_norm_steps: List[float]
    contraction_constant: float
    posterior_error_bound: float
    bounds: Tuple[float, float]
    seed: int

    def within_bounds(self, tol: float = 0.0) -> bool:
        lower, upper = self.bounds
        values = self.A_star.values
        return bool(np.all(values >= lower - tol) and np.all(values <= upper + tol))


def log_fixed_point(
    model: FactorModel,
    K: ConstraintSet,
    spec: UtilitySpec,
    settings: SolverSettings,
    nodes: Optional[ArrayLike] = None,
) -> LogFixedPointResult:
    """
    Fixed point of the affine log-utility operator

        A(y) = k E_y[log X*_tau] + e^{-rho tau} E_y[h(Y_tau) + A(Y_tau) - rho tau gamma]

    with ``k = (1 - gamma e^{-rho tau}) / (e^{rho tau} - 1)``, and
    ``C* = (1 - gamma) / (e^{rho tau} - 1)``. ``E[log X*]`` integrates the
    growth-optimal rate along frozen factor paths.
    """
    if not spec.is_log:
        raise ModelDomainError("log_fixed_point needs utility mode 'log'.")
    c = contraction_constant(model, spec)
    rho, tau, gamma = spec.rho, spec.tau, spec.gamma
    e = np.exp(rho * tau)
    weight = (1.0 - gamma / e) / (e - 1.0)
    C_star = (1.0 - gamma) / (e - 1.0)
    lower, upper = theoretical_bounds(model, spec)
    y_nodes = factor_grid(model, spec, settings) if nodes is None else np.asarray(nodes)

    seed = sweep_seed(settings, 0)
    path_sets = [
        simulate_factor(model, y, period_config(spec, settings, derive_seed(seed, j)))
        for j, y in enumerate(y_nodes)
    ]
    y_low = min(float(p.y_paths.min()) for p in path_sets)
    y_high = max(float(p.y_paths.max()) for p in path_sets)
    fine = (
        np.linspace(y_low, y_high, LOG_RATE_NODES)
        if y_high > y_low
        else np.array([y_low])
    )
    rate = ValueGrid(fine, log_growth_rate(model, K, fine), allow_negative=True)

    growth = np.array(
        [np.mean(rate(p.y_paths[:, :-1]).sum(axis=1) * p.dt) for p in path_sets]
    )
    level = np.array([np.mean(spec.h(p.y_end)) for p in path_sets])
    A = ValueGrid.constant(y_nodes, lower, allow_negative=True)
    steps: List[float] = []
    for k in range(settings.max_iterations):
        continuation = np.array([np.mean(A(p.y_end)) for p in path_sets])
        updated = A.with_values(
            weight * growth + (level + continuation - rho * tau * gamma) / e
        )
        step = updated.distance(A)
        steps.append(step)
        A = updated
        if step * c / (1.0 - c) <= settings.tol:
            break
    else:
        raise ConvergenceError(
            f"Log fixed point did not converge in {settings.max_iterations} sweeps."
        )

    if A.inf < 0.0:
        logger.warning(
            f"Log-utility fixed point is negative somewhere (min {A.inf:.6g})."
        )
    logger.info(
        f"Log fixed point after {len(steps)} sweep(s): A* in [{A.inf:.6g}, "
        f"{A.sup:.6g}], C*={C_star:.6g}."
    )
    return LogFixedPointResult(
        A_star=A,
        C_star=float(C_star),
        growth=ValueGrid(y_nodes, growth, allow_negative=True),
        iterations=len(steps),
        sup_norm_steps=steps,
        contraction_constant=c,
        posterior_error_bound=steps[-1] * c / (1.0 - c),
        bounds=(lower, upper),
        seed=seed,
    )

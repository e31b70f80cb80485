"""
Periodic policies, multi-period rollouts and their verification statistics.

A rollout re-applies the stationary one-period construction N times. Each
period's gross wealth ratio is either sampled from the dual representation
``x*(lambda(Y_start) Z / B, Y_end)`` or produced by simulating a feedback
policy. Along the way the process

    D_n = sum_{i<=n} e^{-rho T_i} U_i + e^{-rho T_n} V(X_{T_n}, Y_{T_n})

is recorded; it is a supermartingale for any admissible policy and a
martingale for the optimal one.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .constraints import (
    ConstraintKind,
    ConstraintSet,
    contains,
    nu_star_log,
    nu_star_power_gamma1,
)
from .dual import DualControl, minimize_dual, multiplier_for_deflator
from .errors import InconsistentBindingSetError, ModelDomainError
from .fixedpoint import (
    merton_seed,
    optimize_feedback_policy,
    period_config,
    theoretical_bounds,
)
from .grid import GridFeedback, ValueGrid
from .market import (
    FactorModel,
    PathSet,
    binned_statistics,
    cell_nodes,
    sharpe_theta,
    simulate_factor,
    simulate_wealth_density,
)
from .montecarlo import MeanEstimate, derive_seed, estimate_mean
from .settings import SolverSettings
from .utility import ModifiedUtility, UtilitySpec, conjugate

logger = logging.getLogger(__name__)

# --- Constants ---
ROLLOUT_STREAM: int = 2
LAMBDA_STREAM: int = 3
CONTROL_STREAM: int = 4
BINDING_TOL: float = 1e-12
MAX_ENUMERATED_ASSETS: int = 12
DETERMINISTIC_ATOL: float = 1e-10
POLICY_MODES = ("power_general", "power_gamma1", "log")
ROUTES = ("dual", "policy")


class PolicyPoint(NamedTuple):
    """Portfolio and constraint parameter at one factor level."""

    pi: NDArray[np.float64]
    nu: NDArray[np.float64]


def _covariance(model: FactorModel, y: float) -> NDArray[np.float64]:
    sigma = model.sigma(y)
    return sigma @ sigma.T


def _shifted_policy(
    model: FactorModel, y: float, nu: NDArray[np.float64], risk: float
) -> NDArray[np.float64]:
    """``(sigma sigma^T)^{-1} (mu - r 1 + nu) / risk``."""
    excess = model.coefficients.excess(y)
    return np.linalg.solve(_covariance(model, y), excess + nu) / risk


def _binding_set_solution(
    model: FactorModel, K: ConstraintSet, alpha: float, y: float
) -> PolicyPoint:
    """
    KKT solution for no-short selling with a cap on total exposure.

    Active sets S are tried by increasing size. With the cap binding the
    held assets share ``nu_j = phi <= 0`` where

        phi = (a (1 - alpha) - 1^T C_S^{-1} ex_S) / (1^T C_S^{-1} 1),

    with the cap slack ``phi = 0``. The remaining nu entries follow from
    ``nu = (1 - alpha) C pi - ex`` and must not undercut ``phi``.

    Raises:
        InconsistentBindingSetError: If no active set is self-consistent.
    """
    n, a, risk = K.n, K.a, 1.0 - alpha
    if n > MAX_ENUMERATED_ASSETS:
        raise InconsistentBindingSetError(
            f"Active-set enumeration is limited to {MAX_ENUMERATED_ASSETS} assets."
        )
    cov = _covariance(model, y)
    excess = model.coefficients.excess(y)
    subsets = itertools.chain.from_iterable(
        itertools.combinations(range(n), size) for size in range(n + 1)
    )
    for subset in subsets:
        held = list(subset)
        for capped in (True, False):
            pi = np.zeros(n)
            phi = 0.0
            if held:
                cov_s = cov[np.ix_(held, held)]
                ones = np.ones(len(held))
                inv_ex = np.linalg.solve(cov_s, excess[held])
                inv_one = np.linalg.solve(cov_s, ones)
                if capped:
                    phi = (a * risk - ones @ inv_ex) / (ones @ inv_one)
                pi[held] = (inv_ex + phi * inv_one) / risk
            elif capped:
                continue
            nu = risk * cov @ pi - excess
            nu[held] = phi
            total = pi.sum()
            consistent = (
                np.all(pi >= -BINDING_TOL)
                and phi <= BINDING_TOL
                and np.all(nu >= phi - BINDING_TOL)
                and total <= a + BINDING_TOL
                and (not capped or abs(total - a) <= 1e3 * BINDING_TOL)
            )
            if consistent:
                return PolicyPoint(np.maximum(pi, 0.0), nu)
    raise InconsistentBindingSetError(
        f"No self-consistent active set at y={y:.4g}."
    )


def gamma1_policy_point(
    model: FactorModel, K: ConstraintSet, alpha: float, y: float
) -> PolicyPoint:
    """Optimal portfolio and nu* of the gamma = 1 power investor at ``y``."""
    if not alpha < 1.0 or alpha == 0.0:
        raise ModelDomainError(f"alpha must be < 1 and nonzero, got {alpha}.")
    risk = 1.0 - alpha
    merton = _shifted_policy(model, y, np.zeros(K.n), risk)
    if contains(K, merton):
        return PolicyPoint(merton, np.zeros(K.n))
    if K.kind is ConstraintKind.NO_SHORT_BORROW_CAP:
        try:
            return _binding_set_solution(model, K, alpha, y)
        except InconsistentBindingSetError as e:
            logger.warning(f"{e} Falling back to the numerical nu*.")
    nu = nu_star_power_gamma1(K, sharpe_theta(model, y), model.sigma(y), alpha)
    return PolicyPoint(_shifted_policy(model, y, nu, risk), nu)


def policy_gamma1(
    model: FactorModel, K: ConstraintSet, alpha: float, y: float
) -> NDArray[np.float64]:
    """``pi = (sigma sigma^T)^{-1} (mu - r 1 + nu*) / (1 - alpha)``."""
    return gamma1_policy_point(model, K, alpha, y).pi


def log_policy_point(model: FactorModel, K: ConstraintSet, y: float) -> PolicyPoint:
    nu = nu_star_log(K, sharpe_theta(model, y), model.sigma(y))
    return PolicyPoint(_shifted_policy(model, y, nu, 1.0), nu)


def policy_log(model: FactorModel, K: ConstraintSet, y: float) -> NDArray[np.float64]:
    """Growth-optimal constrained portfolio ``(sigma sigma^T)^{-1}(mu - r 1 + nu*)``."""
    return log_policy_point(model, K, y).pi


# --- Value function ---
def value_function(
    spec: UtilitySpec,
    A: ValueGrid,
    x: ArrayLike,
    y: ArrayLike,
    C_star: float = 0.0,
) -> NDArray[np.float64]:
    """``V(x, y)`` of the power or the logarithmic investor."""
    x = np.asarray(x, dtype=np.float64)
    if spec.is_log:
        return np.asarray(A(y)) + C_star * np.log(x)
    alpha = spec.alpha
    return (
        np.exp(-spec.rho * spec.tau * spec.gamma * alpha)
        * np.asarray(A(y))
        * np.exp(spec.continuation_exponent * np.log(x))
        / alpha
    )


@dataclass(frozen=True)
class PeriodicPolicy:
    """
    Stationary one-period construction reused every period.

    Attributes:
        mode: "power_general", "power_gamma1" or "log".
        spec: Preferences.
        A_star: Fixed point A*.
        control: Dual feedback (nu, eta) reused each period.
        lambda_grid: Budget multiplier per period start level.
        feedback: Portfolio feedback y -> pi, where available.
        C_star: Log-wealth coefficient of V in log mode.
    """

    mode: str
    spec: UtilitySpec
    A_star: ValueGrid
    control: DualControl
    lambda_grid: ValueGrid
    feedback: Optional[GridFeedback] = None
    C_star: float = 0.0

    def __post_init__(self):
        if self.mode not in POLICY_MODES:
            raise ModelDomainError(f"Unknown policy mode '{self.mode}'.")

    @property
    def utility(self) -> ModifiedUtility:
        return ModifiedUtility(self.spec, self.A_star)

    def value(self, x: ArrayLike, y: ArrayLike) -> NDArray[np.float64]:
        return value_function(self.spec, self.A_star, x, y, self.C_star)


def build_periodic_policy(
    model: FactorModel,
    K: ConstraintSet,
    spec: UtilitySpec,
    A_star: ValueGrid,
    settings: SolverSettings,
    C_star: float = 0.0,
) -> PeriodicPolicy:
    """
    Assemble the periodic policy on the nodes of ``A_star``.

    gamma = 1 and log utility use their closed-form portfolios and nu*.
    Otherwise the dual search and the primal policy search run once from
    the factor's start level, and the resulting feedback is reused. The
    multiplier is re-solved at every node.
    """
    nodes = A_star.y_nodes
    mu = ModifiedUtility(spec, A_star)
    if spec.is_log:
        mode = "log"
        points = [log_policy_point(model, K, y) for y in nodes]
    elif spec.gamma == 1.0:
        mode = "power_gamma1"
        points = [gamma1_policy_point(model, K, spec.alpha, y) for y in nodes]
    else:
        mode = "power_general"
        points = None

    if points is not None:
        feedback = GridFeedback(nodes, np.array([p.pi for p in points]))
        control = DualControl.from_nodes(K, nodes, np.array([p.nu for p in points]))
    else:
        y_start = model.factor.y0
        paths = simulate_factor(
            model,
            y_start,
            period_config(spec, settings, derive_seed(settings.seed, CONTROL_STREAM)),
        )
        search = minimize_dual(model, mu, K, paths, settings)
        control = search.control
        cells = cell_nodes(paths, settings.policy_bins)
        seed = np.array([merton_seed(model, spec, K, y) for y in cells])
        primal = optimize_feedback_policy(
            mu, binned_statistics(model, paths, cells), K, settings, seed
        )
        feedback = primal.policy

    lambdas = []
    for j, y in enumerate(nodes):
        if spec.is_log:
            lambdas.append(1.0)
            continue
        paths = simulate_factor(
            model,
            y,
            period_config(spec, settings, derive_seed(settings.seed, LAMBDA_STREAM, j)),
        )
        sample = simulate_wealth_density(
            model, paths, _zero_policy(model), control, log_cap=settings.log_cap
        )
        lambdas.append(
            multiplier_for_deflator(mu, sample.log_z - sample.log_b, sample.y_end)
        )
    logger.info(
        f"Built {mode} policy on {nodes.size} node(s); lambda in "
        f"[{min(lambdas):.6g}, {max(lambdas):.6g}]."
    )
    return PeriodicPolicy(
        mode=mode,
        spec=spec,
        A_star=A_star,
        control=control,
        lambda_grid=ValueGrid(nodes, np.array(lambdas)),
        feedback=feedback,
        C_star=C_star,
    )


def _zero_policy(model: FactorModel) -> Callable[[NDArray[np.float64]], NDArray[np.float64]]:
    return lambda y: np.zeros((*np.shape(y), model.n))


# --- One-period sampling ---
@dataclass(frozen=True)
class RatioSample:
    ratio: NDArray[np.float64]
    y_end: NDArray[np.float64]
    deflator: NDArray[np.float64]
    budget: MeanEstimate


def optimal_ratio_sampler(
    model: FactorModel,
    mu_star: ModifiedUtility,
    ctrl: DualControl,
    paths: PathSet,
    lam: Optional[ArrayLike] = None,
    log_cap: float = 700.0,
) -> RatioSample:
    """
    Sample the optimal one-period gross ratio ``x*(lambda Z / B, Y_end)``.

    Args:
        model: Factor model.
        mu_star: Modified utility at A*.
        ctrl: Dual control; its lambda is used unless ``lam`` is given.
        paths: Paths of the period (one start level per path allowed).
        lam: Multiplier, scalar or one per path.

    Returns:
        RatioSample with the budget statistic ``E[ratio Z / B]``.
    """
    sample = simulate_wealth_density(
        model, paths, _zero_policy(model), ctrl, log_cap=log_cap
    )
    deflator = sample.deflator
    multiplier = ctrl.lam if lam is None else np.asarray(lam, dtype=np.float64)
    _, ratio = conjugate(mu_star, multiplier * deflator, sample.y_end)
    ratio = np.asarray(ratio, dtype=np.float64)
    budget = estimate_mean(ratio * deflator, paths.antithetic)
    return RatioSample(ratio, sample.y_end, deflator, budget)


# --- Rollout ---
@dataclass(frozen=True)
class RolloutResult:
    """
    Per-path trajectories of a rollout.

    Arrays have one row per path; ``wealth`` and ``D`` have N + 1 columns
    (T_0..T_N), ``ratios`` and ``utilities`` have N.
    """

    wealth: NDArray[np.float64] = field(repr=False)
    ratios: NDArray[np.float64] = field(repr=False)
    utilities: NDArray[np.float64] = field(repr=False)
    D: NDArray[np.float64] = field(repr=False)
    factor: NDArray[np.float64] = field(repr=False)
    objective: MeanEstimate
    value_estimate: MeanEstimate
    tail_bound: float
    budgets: List[MeanEstimate]
    negative_part: List[float]
    antithetic: bool
    route: str
    seeds: List[int] = field(default_factory=list)

    @property
    def periods(self) -> int:
        return int(self.ratios.shape[1])

    @property
    def count(self) -> int:
        return int(self.wealth.shape[0])


def period_utility(
    spec: UtilitySpec,
    log_x_prev: NDArray[np.float64],
    log_x: NDArray[np.float64],
    y: NDArray[np.float64],
) -> NDArray[np.float64]:
    """Utility of ``X_{T_i} / (e^{rho tau} X_{T_{i-1}})^gamma`` at level h(Y_{T_i})."""
    relative = log_x - spec.gamma * (spec.rho * spec.tau + log_x_prev)
    level = np.asarray(spec.h(y), dtype=np.float64)
    if spec.is_log:
        return relative + level
    return np.exp(spec.alpha * relative) * level / spec.alpha


def value_bounds(
    model: FactorModel, spec: UtilitySpec, x: ArrayLike, C_star: float = 0.0
) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """
    Lower and upper bounds of V(x, .) implied by the constant bounds of A*.

    For alpha < 0 the factor ``1 / alpha`` flips the order, so the lower
    bound of V comes from the upper bound of A*.
    """
    lower_A, upper_A = theoretical_bounds(model, spec)
    x = np.asarray(x, dtype=np.float64)
    if spec.is_log:
        return lower_A + C_star * np.log(x), upper_A + C_star * np.log(x)
    grid = ValueGrid.constant([0.0], 1.0)
    unit = value_function(spec, grid, x, 0.0)
    first, second = unit * lower_A, unit * upper_A
    return np.minimum(first, second), np.maximum(first, second)


def rollout(
    model: FactorModel,
    K: ConstraintSet,
    policy: PeriodicPolicy,
    settings: SolverSettings,
    x0: Optional[float] = None,
    y0: Optional[float] = None,
    n_periods: Optional[int] = None,
    route: str = "dual",
    feedback: Optional[Callable] = None,
) -> RolloutResult:
    """
    Simulate N evaluation periods of the periodic policy.

    Args:
        model: Factor model.
        K: Constraint set (checked for the feedback route).
        policy: Periodic policy.
        settings: Seed, path count, steps and defaults for x0 / N.
        x0: Initial wealth (defaults to ``settings.x0``).
        y0: Initial factor level (defaults to the factor's y0).
        n_periods: Number of periods (defaults to ``settings.periods``).
        route: "dual" samples ratios from the dual representation, "policy"
            simulates ``policy.feedback``.
        feedback: Explicit feedback map overriding the route, e.g. a
            suboptimal or risk-free portfolio.

    Raises:
        WealthOverflowError: If a wealth path explodes.
    """
    if route not in ROUTES:
        raise ModelDomainError(f"Unknown rollout route '{route}'.")
    x0 = settings.x0 if x0 is None else x0
    y0 = model.factor.y0 if y0 is None else y0
    n_periods = settings.periods if n_periods is None else n_periods
    if n_periods < 1:
        raise ModelDomainError(f"n_periods must be >= 1, got {n_periods}.")
    spec = policy.spec
    if feedback is None and route == "policy":
        if policy.feedback is None:
            raise ModelDomainError("The policy carries no portfolio feedback.")
        feedback = policy.feedback
    mu_star = policy.utility
    rho_tau = spec.rho * spec.tau

    count = settings.paths
    log_x = np.full(count, np.log(x0))
    y = np.full(count, float(y0))
    wealth = [np.exp(log_x)]
    factor = [y.copy()]
    ratios, utilities = [], []
    D = [np.asarray(policy.value(np.exp(log_x), y), dtype=np.float64)]
    partial = np.zeros(count)
    budgets: List[MeanEstimate] = []
    negative_part: List[float] = []
    seeds: List[int] = []

    for n in range(1, n_periods + 1):
        seed = derive_seed(settings.seed, ROLLOUT_STREAM, n)
        seeds.append(seed)
        paths = simulate_factor(model, y, period_config(spec, settings, seed))
        if feedback is not None:
            sample = simulate_wealth_density(
                model, paths, feedback, log_cap=settings.log_cap
            )
            ratio = sample.x
        else:
            draw = optimal_ratio_sampler(
                model,
                mu_star,
                policy.control,
                paths,
                lam=policy.lambda_grid(y),
                log_cap=settings.log_cap,
            )
            ratio = draw.ratio
            budgets.append(draw.budget)
        log_prev = log_x
        log_x = log_x + np.log(ratio)
        y = paths.y_end
        u = period_utility(spec, log_prev, log_x, y)
        partial = partial + np.exp(-rho_tau * n) * u
        D.append(partial + np.exp(-rho_tau * n) * policy.value(np.exp(log_x), y))
        wealth.append(np.exp(log_x))
        factor.append(y.copy())
        ratios.append(ratio)
        utilities.append(u)
        negative_part.append(float(np.mean(np.maximum(-u, 0.0))))

    lower, upper = value_bounds(model, spec, wealth[-1], policy.C_star)
    tail = np.exp(-rho_tau * n_periods) * np.maximum(np.abs(lower), np.abs(upper))
    antithetic = settings.antithetic
    objective = estimate_mean(partial, antithetic)
    result = RolloutResult(
        wealth=np.column_stack(wealth),
        ratios=np.column_stack(ratios),
        utilities=np.column_stack(utilities),
        D=np.column_stack(D),
        factor=np.column_stack(factor),
        objective=objective,
        value_estimate=estimate_mean(D[-1], antithetic),
        tail_bound=float(np.mean(tail)),
        budgets=budgets,
        negative_part=negative_part,
        antithetic=antithetic,
        route="policy" if feedback is not None else "dual",
        seeds=seeds,
    )
    logger.info(
        f"Rollout over {n_periods} period(s) on {count} paths: objective "
        f"{objective.mean:.6g} (se {objective.std_err:.2e}), tail <= "
        f"{result.tail_bound:.3e}."
    )
    return result


# --- Verification statistics ---
@dataclass(frozen=True)
class IncrementTest:
    """Sample mean of D_n - D_{n-1} with the 3-SE decisions."""

    period: int
    mean: float
    std_err: float
    n_se: float = 3.0
    atol: float = DETERMINISTIC_ATOL

    @property
    def band(self) -> float:
        return self.n_se * self.std_err + self.atol

    @property
    def supermartingale(self) -> bool:
        return self.mean <= self.band

    @property
    def martingale(self) -> bool:
        return abs(self.mean) <= self.band

    @property
    def strictly_negative(self) -> bool:
        return self.mean < -self.band


def verify_martingale_D(result: RolloutResult, n_se: float = 3.0) -> List[IncrementTest]:
    """Per-period increment statistics of D."""
    tests = []
    for n in range(1, result.D.shape[1]):
        estimate = estimate_mean(result.D[:, n] - result.D[:, n - 1], result.antithetic)
        tests.append(IncrementTest(n, estimate.mean, estimate.std_err, n_se))
    flagged = [t.period for t in tests if not t.martingale]
    if flagged:
        logger.info(f"D increments differ from 0 beyond {n_se} SE in period(s) {flagged}.")
    return tests


@dataclass(frozen=True)
class ValueBoundsReport:
    lower: float
    upper: float
    estimate: float
    std_err: float
    n_se: float = 3.0
    rtol: float = 1e-9

    @property
    def passed(self) -> bool:
        slack = self.n_se * self.std_err + self.rtol * max(1.0, abs(self.estimate))
        return self.lower - slack <= self.estimate <= self.upper + slack


def value_bounds_check(
    model: FactorModel,
    spec: UtilitySpec,
    x0: float,
    estimate: MeanEstimate,
    C_star: float = 0.0,
    n_se: float = 3.0,
) -> ValueBoundsReport:
    """Check ``lower <= V(x0) <= upper`` for an estimated value."""
    lower, upper = value_bounds(model, spec, x0, C_star)
    report = ValueBoundsReport(
        float(lower), float(upper), estimate.mean, estimate.std_err, n_se
    )
    if not report.passed:
        logger.warning(
            f"Estimated value {estimate.mean:.6g} lies outside "
            f"[{report.lower:.6g}, {report.upper:.6g}]."
        )
    return report


def riskfree_partial_sum(
    model: FactorModel, spec: UtilitySpec, x0: float, n_periods: int
) -> float:
    """
    Objective of holding only the bank account at rate r_lower with level m.

    This is the partial sum of the series behind the lower value bound.
    """
    tau, rho = spec.tau, spec.rho
    periods = np.arange(1, n_periods + 1)
    log_x = np.log(x0) + model.r_lower * tau * periods
    log_prev = log_x - model.r_lower * tau
    relative = log_x - spec.gamma * (rho * tau + log_prev)
    discount = np.exp(-rho * tau * periods)
    if spec.is_log:
        terms = relative + model.m
    else:
        terms = np.exp(spec.alpha * relative) * model.m / spec.alpha
    return float(np.sum(discount * terms))

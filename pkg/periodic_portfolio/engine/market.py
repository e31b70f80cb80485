"""
Stochastic factor market.

Asset prices follow ``dS/S = mu(Y) dt + sigma(Y) dW1`` with a scalar factor
``dY = b(Y) dt + beta (q . dW1 + sqrt(1 - |q|^2) dW2)``. The coefficient
families all share the structure ``sigma(y) = s(y) sigma0`` with a positive
scalar ``s``, which keeps the Sharpe ratio a cheap linear solve and lets each
family certify its global bounds analytically.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, List, NamedTuple, Optional, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ModelDomainError, SingularVolatilityError, WealthOverflowError
from .grid import GridFeedback
from .montecarlo import standard_normals

logger = logging.getLogger(__name__)

FloatOrArray = Union[float, NDArray[np.float64]]

# --- Constants ---
DEFAULT_STEPS_PER_HORIZON: int = 64
CERTIFICATE_TOL: float = 1e-12
STATUS_PASS = "pass"
STATUS_NOT_FALSIFIED = "not_falsified"
STATUS_FAIL = "fail"


class Certificate(NamedTuple):
    """Analytic global bounds of a coefficient family."""

    r_bar: float
    r_lower: float
    M0: float
    kappa0: float


def _as_matrix(sigma: ArrayLike) -> NDArray[np.float64]:
    matrix = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    if matrix.shape[0] != matrix.shape[1]:
        raise ModelDomainError(f"Volatility must be square, got {matrix.shape}.")
    return matrix


def _min_eig(sigma: NDArray[np.float64]) -> float:
    return float(np.linalg.eigvalsh(sigma @ sigma.T)[0])


# --- Coefficient families ---
class CoefficientFamily(ABC):
    """r(y), mu(y) and sigma(y) = vol_scale(y) * sigma0."""

    sigma0: NDArray[np.float64]

    @property
    def n(self) -> int:
        return int(self.sigma0.shape[0])

    @cached_property
    def sigma0_inv(self) -> NDArray[np.float64]:
        try:
            return np.linalg.inv(self.sigma0)
        except np.linalg.LinAlgError as e:
            raise SingularVolatilityError(
                f"Volatility matrix is singular: {e}"
            ) from e

    @abstractmethod
    def rate(self, y: ArrayLike) -> FloatOrArray: ...

    @abstractmethod
    def drift(self, y: ArrayLike) -> NDArray[np.float64]:
        """mu(y) with shape ``(*y.shape, n)``."""

    @abstractmethod
    def vol_scale(self, y: ArrayLike) -> FloatOrArray: ...

    @abstractmethod
    def certificate(self) -> Certificate: ...

    def sigma(self, y: ArrayLike) -> NDArray[np.float64]:
        scale = np.asarray(self.vol_scale(y), dtype=np.float64)
        return scale[..., None, None] * self.sigma0

    def excess(self, y: ArrayLike) -> NDArray[np.float64]:
        """mu(y) - r(y) 1."""
        return self.drift(y) - np.asarray(self.rate(y))[..., None]

    def _theta_at(self, excess: NDArray[np.float64], scale: float) -> float:
        theta = self.sigma0_inv @ excess / scale
        return float(theta @ theta)


@dataclass(frozen=True)
class ConstantCoefficients(CoefficientFamily):
    r: float
    mu: NDArray[np.float64]
    sigma0: NDArray[np.float64]

    def __post_init__(self):
        object.__setattr__(self, "mu", np.atleast_1d(np.asarray(self.mu, float)))
        object.__setattr__(self, "sigma0", _as_matrix(self.sigma0))
        if self.mu.shape != (self.n,):
            raise ModelDomainError("mu and sigma dimensions differ.")

    def rate(self, y: ArrayLike) -> FloatOrArray:
        out = np.full(np.shape(y), float(self.r))
        return float(out) if out.ndim == 0 else out

    def drift(self, y: ArrayLike) -> NDArray[np.float64]:
        return np.broadcast_to(self.mu, (*np.shape(y), self.n)).copy()

    def vol_scale(self, y: ArrayLike) -> FloatOrArray:
        out = np.ones(np.shape(y))
        return float(out) if out.ndim == 0 else out

    def certificate(self) -> Certificate:
        M0 = self._theta_at(self.mu - self.r, 1.0)
        return Certificate(self.r, self.r, M0, _min_eig(self.sigma0))


@dataclass(frozen=True)
class AffineCoefficients(CoefficientFamily):
    """r and mu affine in the factor clipped to ``[y_low, y_high]``."""

    r0: float
    r1: float
    mu0: NDArray[np.float64]
    mu1: NDArray[np.float64]
    sigma0: NDArray[np.float64]
    y_low: float
    y_high: float

    def __post_init__(self):
        object.__setattr__(self, "mu0", np.atleast_1d(np.asarray(self.mu0, float)))
        object.__setattr__(self, "mu1", np.atleast_1d(np.asarray(self.mu1, float)))
        object.__setattr__(self, "sigma0", _as_matrix(self.sigma0))
        if self.mu0.shape != (self.n,) or self.mu1.shape != (self.n,):
            raise ModelDomainError("mu and sigma dimensions differ.")
        if not self.y_low < self.y_high:
            raise ModelDomainError("Affine family needs y_low < y_high.")

    def _clip(self, y: ArrayLike) -> NDArray[np.float64]:
        return np.clip(np.asarray(y, dtype=np.float64), self.y_low, self.y_high)

    def rate(self, y: ArrayLike) -> FloatOrArray:
        out = self.r0 + self.r1 * self._clip(y)
        return float(out) if np.ndim(out) == 0 else out

    def drift(self, y: ArrayLike) -> NDArray[np.float64]:
        return self.mu0 + self._clip(y)[..., None] * self.mu1

    def vol_scale(self, y: ArrayLike) -> FloatOrArray:
        out = np.ones(np.shape(y))
        return float(out) if out.ndim == 0 else out

    def certificate(self) -> Certificate:
        ends = np.array([self.y_low, self.y_high])
        rates = self.rate(ends)
        # |theta|^2 is convex along the clipped segment
        M0 = max(self._theta_at(ex, 1.0) for ex in self.excess(ends))
        return Certificate(
            float(rates.max()), float(rates.min()), M0, _min_eig(self.sigma0)
        )


@dataclass(frozen=True)
class SigmoidCoefficients(CoefficientFamily):
    """
    Coefficients modulated by ``s(y) = 1 / (1 + exp(-slope (y - center)))``.

    ``r = r0 + r1 s``, ``mu = mu0 + mu1 s`` and ``sigma = sigma0 (1 + vol_mod s)``
    with ``vol_mod > -1``.
    """

    r0: float
    r1: float
    mu0: NDArray[np.float64]
    mu1: NDArray[np.float64]
    sigma0: NDArray[np.float64]
    vol_mod: float = 0.0
    slope: float = 1.0
    center: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mu0", np.atleast_1d(np.asarray(self.mu0, float)))
        object.__setattr__(self, "mu1", np.atleast_1d(np.asarray(self.mu1, float)))
        object.__setattr__(self, "sigma0", _as_matrix(self.sigma0))
        if self.mu0.shape != (self.n,) or self.mu1.shape != (self.n,):
            raise ModelDomainError("mu and sigma dimensions differ.")
        if self.vol_mod <= -1.0:
            raise ModelDomainError(f"vol_mod must exceed -1, got {self.vol_mod}.")

    def _s(self, y: ArrayLike) -> NDArray[np.float64]:
        z = self.slope * (np.asarray(y, dtype=np.float64) - self.center)
        return 0.5 * (1.0 + np.tanh(0.5 * z))

    def rate(self, y: ArrayLike) -> FloatOrArray:
        out = self.r0 + self.r1 * self._s(y)
        return float(out) if np.ndim(out) == 0 else out

    def drift(self, y: ArrayLike) -> NDArray[np.float64]:
        return self.mu0 + self._s(y)[..., None] * self.mu1

    def vol_scale(self, y: ArrayLike) -> FloatOrArray:
        out = 1.0 + self.vol_mod * self._s(y)
        return float(out) if np.ndim(out) == 0 else out

    def certificate(self) -> Certificate:
        # theta(s) is linear-fractional in s, so |theta|^2 peaks at s = 0 or 1
        ex0 = self.mu0 - self.r0
        ex1 = self.mu0 + self.mu1 - self.r0 - self.r1
        M0 = max(
            self._theta_at(ex0, 1.0), self._theta_at(ex1, 1.0 + self.vol_mod)
        )
        kappa0 = _min_eig(self.sigma0) * min(1.0, (1.0 + self.vol_mod) ** 2)
        return Certificate(
            max(self.r0, self.r0 + self.r1),
            min(self.r0, self.r0 + self.r1),
            M0,
            kappa0,
        )


@dataclass(frozen=True)
class OUFactor:
    """``dY = kappa (mean - Y) dt + beta dW``; ``kappa = 0`` gives Brownian motion."""

    kappa: float
    mean: float
    beta: float
    y0: float = 0.0

    def __post_init__(self):
        if self.beta == 0.0:
            raise ModelDomainError("Factor volatility beta must be nonzero.")
        if self.kappa < 0.0:
            raise ModelDomainError(f"kappa must be >= 0, got {self.kappa}.")

    def drift(self, y: ArrayLike) -> FloatOrArray:
        return self.kappa * (self.mean - np.asarray(y, dtype=np.float64))

    def spread(self, tau: float) -> float:
        """Stationary standard deviation, or the tau-horizon one if kappa = 0."""
        if self.kappa > 0.0:
            return abs(self.beta) / np.sqrt(2.0 * self.kappa)
        return abs(self.beta) * np.sqrt(tau)

    def mean_at(self, y0: float, t: float) -> float:
        return self.mean + (y0 - self.mean) * np.exp(-self.kappa * t)


@dataclass(frozen=True)
class FactorModel:
    """
    Market coefficients plus the bounds the solver relies on.

    Attributes:
        coefficients: Built-in coefficient family.
        factor: Factor dynamics.
        q: Factor / asset correlation vector, |q| <= 1.
        r_bar: Upper bound of r.
        r_lower: Infimum of r.
        M0: Bound on |theta|^2.
        kappa0: Non-degeneracy constant of sigma sigma^T.
        m: Lower bound of the utility level h, in (0, 1].
    """

    coefficients: CoefficientFamily
    factor: OUFactor
    q: NDArray[np.float64]
    r_bar: float
    r_lower: float
    M0: float
    kappa0: float
    m: float

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=np.float64))
        object.__setattr__(self, "q", q)
        if q.shape != (self.n,):
            raise ModelDomainError(f"q must have length {self.n}, got {q.size}.")
        if np.linalg.norm(q) > 1.0 + CERTIFICATE_TOL:
            raise ModelDomainError(f"|q| must be <= 1, got {np.linalg.norm(q)}.")
        if not 0.0 < self.m <= 1.0:
            raise ModelDomainError(f"m must lie in (0, 1], got {self.m}.")
        if self.M0 < 0.0 or self.kappa0 < 0.0:
            raise ModelDomainError("M0 and kappa0 must be non-negative.")

    @classmethod
    def from_families(
        cls,
        coefficients: CoefficientFamily,
        factor: OUFactor,
        q: ArrayLike,
        m: float,
        **overrides: Optional[float],
    ) -> "FactorModel":
        """Build a model whose bounds default to the family certificate."""
        bounds = coefficients.certificate()._asdict()
        bounds.update({k: v for k, v in overrides.items() if v is not None})
        return cls(coefficients, factor, np.asarray(q, dtype=np.float64), m=m, **bounds)

    @property
    def n(self) -> int:
        return self.coefficients.n

    @property
    def q_perp(self) -> float:
        return float(np.sqrt(max(0.0, 1.0 - self.q @ self.q)))

    def r(self, y: ArrayLike) -> FloatOrArray:
        return self.coefficients.rate(y)

    def mu(self, y: ArrayLike) -> NDArray[np.float64]:
        return self.coefficients.drift(y)

    def sigma(self, y: ArrayLike) -> NDArray[np.float64]:
        return self.coefficients.sigma(y)

    def b(self, y: ArrayLike) -> FloatOrArray:
        return self.factor.drift(y)

    def beta(self, y: ArrayLike) -> FloatOrArray:
        out = np.full(np.shape(y), float(self.factor.beta))
        return float(out) if out.ndim == 0 else out


def sharpe_theta(model: FactorModel, y: ArrayLike) -> NDArray[np.float64]:
    """Sharpe ratio ``sigma(y)^{-1} (mu(y) - r(y) 1)``; shape ``(*y.shape, n)``."""
    coeffs = model.coefficients
    excess = coeffs.excess(y)
    scale = np.asarray(coeffs.vol_scale(y), dtype=np.float64)
    try:
        theta = np.linalg.solve(coeffs.sigma0, excess[..., None])[..., 0]
    except np.linalg.LinAlgError as e:
        raise SingularVolatilityError(f"Volatility matrix is singular: {e}") from e
    return theta / scale[..., None]


def zeta(model: FactorModel, x: float) -> float:
    """``zeta(x) = r_bar x + x M0 / (2 (1 - x))`` for x < 1."""
    if x >= 1.0:
        raise ModelDomainError(f"zeta is defined for x < 1, got {x}.")
    return model.r_bar * x + x * model.M0 / (2.0 * (1.0 - x))


# --- Assumption validation ---
@dataclass(frozen=True)
class AssumptionCheck:
    name: str
    status: str
    lhs: float
    rhs: float
    worst_y: Optional[float] = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status != STATUS_FAIL


@dataclass(frozen=True)
class ValidationReport:
    checks: List[AssumptionCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.ok for check in self.checks)

    @property
    def failures(self) -> List[AssumptionCheck]:
        return [check for check in self.checks if not check.ok]

    def to_records(self) -> List[dict]:
        return [
            {
                "name": c.name,
                "status": c.status,
                "lhs": c.lhs,
                "rhs": c.rhs,
                "worst_y": c.worst_y,
                "detail": c.detail,
            }
            for c in self.checks
        ]


def _sampled_check(
    name: str,
    values: NDArray[np.float64],
    bound: float,
    ys: NDArray[np.float64],
    upper: bool,
    certified: bool,
) -> AssumptionCheck:
    """``values <= bound`` (upper) or ``values >= bound`` on the samples."""
    slack = bound - values if upper else values - bound
    worst = int(np.argmin(slack))
    lhs = float(values[worst])
    if slack[worst] < -CERTIFICATE_TOL * max(1.0, abs(bound)):
        status, detail = STATUS_FAIL, "violated on the sampled factor range"
    elif certified:
        status, detail = STATUS_PASS, "implied by the family certificate"
    else:
        status, detail = STATUS_NOT_FALSIFIED, "holds on samples only"
    return AssumptionCheck(name, status, lhs, float(bound), float(ys[worst]), detail)


def validate_model(model: FactorModel, spec, y_samples: Sequence[float]) -> ValidationReport:
    """
    Check the standing assumptions of the solver.

    Sampled bounds are compared against the coefficient family's analytic
    certificate; sampling alone can only yield "not_falsified".

    Args:
        model: Factor model with its declared bounds.
        spec: UtilitySpec (level function, alpha, gamma, rho).
        y_samples: Factor levels to sample.

    Returns:
        ValidationReport; failures are entries, never exceptions.
    """
    ys = np.sort(np.atleast_1d(np.asarray(y_samples, dtype=np.float64)))
    cert = model.coefficients.certificate()
    checks: List[AssumptionCheck] = []

    rates = np.asarray(model.r(ys), dtype=np.float64)
    checks.append(
        _sampled_check(
            "r(y) <= r_bar", rates, model.r_bar, ys, True,
            cert.r_bar <= model.r_bar + CERTIFICATE_TOL,
        )
    )
    checks.append(
        _sampled_check(
            "r(y) >= r_lower", rates, model.r_lower, ys, False,
            cert.r_lower >= model.r_lower - CERTIFICATE_TOL,
        )
    )
    theta = sharpe_theta(model, ys)
    checks.append(
        _sampled_check(
            "|theta(y)|^2 <= M0", np.sum(theta**2, axis=-1), model.M0, ys, True,
            cert.M0 <= model.M0 * (1.0 + CERTIFICATE_TOL) + CERTIFICATE_TOL,
        )
    )
    sigmas = model.sigma(ys)
    eigs = np.linalg.eigvalsh(sigmas @ np.swapaxes(sigmas, -1, -2))[..., 0]
    checks.append(
        _sampled_check(
            "a^T sigma sigma^T a >= kappa0 |a|^2", eigs, model.kappa0, ys, False,
            cert.kappa0 >= model.kappa0 - CERTIFICATE_TOL,
        )
    )

    levels = np.atleast_1d(np.asarray(spec.h(ys), dtype=np.float64))
    checks.append(
        _sampled_check(
            "h(y) <= 1", levels, 1.0, ys, True, spec.h.upper <= 1.0
        )
    )
    checks.append(
        _sampled_check(
            "h(y) >= m", levels, model.m, ys, False, spec.h.lower >= model.m
        )
    )

    if spec.is_log:
        name, bound = "rho > 0", 0.0
    else:
        name = "rho > zeta(alpha(1-gamma)) v 0"
        bound = max(zeta(model, spec.continuation_exponent), 0.0)
    status = STATUS_PASS if spec.rho > bound else STATUS_FAIL
    checks.append(
        AssumptionCheck(name, status, float(spec.rho), float(bound), None, "analytic")
    )

    report = ValidationReport(checks)
    for check in report.failures:
        logger.warning(
            f"Assumption '{check.name}' failed: lhs={check.lhs:.6g}, "
            f"rhs={check.rhs:.6g}, worst y={check.worst_y}."
        )
    logger.info(
        f"Model validation {'passed' if report.passed else 'failed'} "
        f"({len(report.failures)} failure(s) over {ys.size} samples)."
    )
    return report


# --- Simulation ---
@dataclass(frozen=True)
class SimConfig:
    """
    Attributes:
        horizon: Simulated time span.
        count: Number of paths.
        seed: Stream seed.
        dt: Euler step; defaults to horizon / 64.
        antithetic: Antithetic Brownian pairs.
        workers: Threads filling normal blocks.
    """

    horizon: float
    count: int
    seed: int
    dt: Optional[float] = None
    antithetic: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.horizon <= 0.0:
            raise ModelDomainError(f"horizon must be > 0, got {self.horizon}.")
        if self.count < 1:
            raise ModelDomainError(f"count must be >= 1, got {self.count}.")
        if self.dt is not None and self.dt <= 0.0:
            raise ModelDomainError(f"dt must be > 0, got {self.dt}.")

    @property
    def steps(self) -> int:
        if self.dt is None:
            return DEFAULT_STEPS_PER_HORIZON
        return max(1, int(round(self.horizon / self.dt)))

    @property
    def step(self) -> float:
        return self.horizon / self.steps


@dataclass(frozen=True)
class PathSet:
    """Factor trajectories with the Brownian increments that drove them."""

    seed: int
    dt: float
    horizon: float
    y_paths: NDArray[np.float64]
    w1_increments: NDArray[np.float64]
    w2_increments: NDArray[np.float64]
    antithetic: bool = True

    @property
    def count(self) -> int:
        return int(self.y_paths.shape[0])

    @property
    def steps(self) -> int:
        return int(self.w2_increments.shape[1])

    @property
    def y_end(self) -> NDArray[np.float64]:
        return self.y_paths[:, -1]


def simulate_factor(model: FactorModel, y0: ArrayLike, cfg: SimConfig) -> PathSet:
    """
    Euler-Maruyama trajectories of the factor.

    Args:
        model: Factor model.
        y0: Start level, scalar or one value per path.
        cfg: Simulation settings.

    Returns:
        PathSet carrying increments for reuse in wealth simulation.
    """
    n, steps, dt = model.n, cfg.steps, cfg.step
    normals = standard_normals(
        cfg.seed, cfg.count, (steps, n + 1), cfg.antithetic, cfg.workers
    )
    increments = normals * np.sqrt(dt)
    dw1, dw2 = increments[..., :n], increments[..., n]
    y = np.empty((cfg.count, steps + 1))
    y[:, 0] = np.broadcast_to(np.asarray(y0, dtype=np.float64), (cfg.count,))
    loading = dw1 @ model.q + model.q_perp * dw2
    for k in range(steps):
        y[:, k + 1] = (
            y[:, k] + model.b(y[:, k]) * dt + model.beta(y[:, k]) * loading[:, k]
        )
    return PathSet(cfg.seed, dt, cfg.horizon, y, dw1, dw2, cfg.antithetic)


@dataclass(frozen=True)
class WealthDensitySample:
    """Terminal logs of wealth, density and auxiliary bank account per path."""

    log_x: NDArray[np.float64]
    log_z: NDArray[np.float64]
    log_b: NDArray[np.float64]
    y_end: NDArray[np.float64]

    @property
    def x(self) -> NDArray[np.float64]:
        return np.exp(self.log_x)

    @property
    def z(self) -> NDArray[np.float64]:
        return np.exp(self.log_z)

    @property
    def b(self) -> NDArray[np.float64]:
        return np.exp(self.log_b)

    @property
    def deflator(self) -> NDArray[np.float64]:
        """Z / B per path."""
        return np.exp(self.log_z - self.log_b)


def simulate_wealth_density(
    model: FactorModel,
    paths: PathSet,
    policy: Callable[[NDArray[np.float64]], NDArray[np.float64]],
    control=None,
    x0: float = 1.0,
    log_cap: float = 700.0,
    auxiliary: bool = False,
) -> WealthDensitySample:
    """
    Log-Euler simulation of wealth, the density Z and the bank account B.

    Args:
        model: Factor model.
        paths: Factor paths; their increments drive every process.
        policy: Feedback map y -> pi with shape ``(*y.shape, n)``.
        control: Object exposing ``nu(y)``, ``eta(y)`` and ``delta(y)``
            feedback maps; ``None`` means nu = 0 and eta = 0.
        x0: Initial wealth.
        log_cap: Bound on |log X|.
        auxiliary: Evolve wealth in the auxiliary market of the control
            (rate r + delta(nu), drift mu + nu + delta(nu) 1).

    Raises:
        WealthOverflowError: If |log X| exceeds ``log_cap``.
    """
    if x0 <= 0.0:
        raise ModelDomainError(f"Initial wealth must be > 0, got {x0}.")
    coeffs, dt = model.coefficients, paths.dt
    sigma0, sigma0_inv = coeffs.sigma0, coeffs.sigma0_inv
    count = paths.count
    log_x = np.full(count, np.log(x0))
    log_z = np.zeros(count)
    log_b = np.zeros(count)

    for k in range(paths.steps):
        y = paths.y_paths[:, k]
        dw1, dw2 = paths.w1_increments[:, k], paths.w2_increments[:, k]
        rate = np.asarray(coeffs.rate(y), dtype=np.float64)
        excess = coeffs.excess(y)
        scale = np.asarray(coeffs.vol_scale(y), dtype=np.float64)
        pi = np.asarray(policy(y), dtype=np.float64).reshape(count, -1)
        exposure = scale[:, None] * (pi @ sigma0)

        if control is None:
            nu = np.zeros_like(excess)
            eta = np.zeros(count)
            delta = np.zeros(count)
        else:
            nu = np.asarray(control.nu(y), dtype=np.float64).reshape(count, -1)
            eta = np.asarray(control.eta(y), dtype=np.float64).reshape(count)
            delta = np.asarray(control.delta(y), dtype=np.float64).reshape(count)

        theta_nu = ((excess + nu) @ sigma0_inv.T) / scale[:, None]
        growth = rate + np.einsum("ij,ij->i", pi, excess)
        if auxiliary:
            growth = growth + delta + np.einsum("ij,ij->i", pi, nu)
        log_x += (
            growth - 0.5 * np.einsum("ij,ij->i", exposure, exposure)
        ) * dt + np.einsum("ij,ij->i", exposure, dw1)
        log_b += (rate + delta) * dt
        log_z += (
            -np.einsum("ij,ij->i", theta_nu, dw1)
            - eta * dw2
            - 0.5 * (np.einsum("ij,ij->i", theta_nu, theta_nu) + eta**2) * dt
        )
        if np.any(np.abs(log_x) > log_cap):
            raise WealthOverflowError(
                f"|log X| exceeded {log_cap} at step {k + 1}; the policy explodes."
            )

    return WealthDensitySample(log_x, log_z, log_b, paths.y_end.copy())


# --- Per-cell sufficient statistics ---
@dataclass(frozen=True)
class BinnedStatistics:
    """
    Sums over the Euler steps of a PathSet, split by the factor cell of each
    step's left end point.

    With feedback controls that are constant on each cell, log-wealth and the
    log of the deflator Z / B are quadratic in the cell values, so every
    candidate control is evaluated without re-simulating.
    """

    nodes: NDArray[np.float64]
    rate_sum: NDArray[np.float64]
    excess_sum: NDArray[np.float64]
    vol_sq_sum: NDArray[np.float64]
    sharpe_score: NDArray[np.float64]
    nu_score: NDArray[np.float64]
    inv_vol_sq_sum: NDArray[np.float64]
    w2_sum: NDArray[np.float64]
    time: NDArray[np.float64]
    y_end: NDArray[np.float64]
    cov0: NDArray[np.float64]
    prec0: NDArray[np.float64]
    antithetic: bool

    @property
    def count(self) -> int:
        return int(self.rate_sum.shape[0])

    @property
    def bins(self) -> int:
        return int(self.nodes.size)

    def log_wealth(self, pi_values: ArrayLike) -> NDArray[np.float64]:
        """log X_tau for X_0 = 1 under the cell policy ``pi_values`` (B, n)."""
        pi = np.asarray(pi_values, dtype=np.float64).reshape(self.bins, -1)
        linear = np.einsum("pbi,bi->p", self.excess_sum, pi)
        quad = np.einsum("bi,ij,bj->b", pi, self.cov0, pi)
        return self.rate_sum + linear - 0.5 * self.vol_sq_sum @ quad

    def wealth_score(self, pi_values: ArrayLike) -> NDArray[np.float64]:
        """Derivative of log X_tau in each cell value; shape (P, B, n)."""
        pi = np.asarray(pi_values, dtype=np.float64).reshape(self.bins, -1)
        return self.excess_sum - self.vol_sq_sum[..., None] * (pi @ self.cov0)

    def log_deflator(
        self,
        nu_values: ArrayLike,
        eta_values: ArrayLike,
        delta_values: ArrayLike,
    ) -> NDArray[np.float64]:
        """log(Z_tau / B_tau) under cell values of nu, eta and delta(nu)."""
        nu = np.asarray(nu_values, dtype=np.float64).reshape(self.bins, -1)
        eta = np.asarray(eta_values, dtype=np.float64).reshape(self.bins)
        delta = np.asarray(delta_values, dtype=np.float64).reshape(self.bins)
        quad = np.einsum("bi,ij,bj->b", nu, self.prec0, nu)
        per_cell = (
            self.sharpe_score
            + np.einsum("pbi,bi->pb", self.nu_score, nu)
            + 0.5 * self.inv_vol_sq_sum * quad
            + self.w2_sum * eta
            + self.time * (0.5 * eta**2 + delta)
        )
        return -self.rate_sum - per_cell.sum(axis=1)


def binned_statistics(
    model: FactorModel, paths: PathSet, nodes: ArrayLike
) -> BinnedStatistics:
    """
    Accumulate the per-cell statistics of a PathSet.

    Args:
        model: Factor model that generated the paths.
        paths: Factor paths with their increments.
        nodes: Cell nodes; cells are split at the midpoints between nodes.
    """
    coeffs, dt = model.coefficients, paths.dt
    sigma0, sigma0_inv = coeffs.sigma0, coeffs.sigma0_inv
    nodes = np.atleast_1d(np.asarray(nodes, dtype=np.float64))
    cells = GridFeedback(nodes, np.zeros((nodes.size, 1)))
    count, bins, n = paths.count, nodes.size, model.n

    rate_sum = np.zeros(count)
    excess_sum = np.zeros((count, bins, n))
    nu_score = np.zeros((count, bins, n))
    vol_sq_sum = np.zeros((count, bins))
    sharpe_score = np.zeros((count, bins))
    inv_vol_sq_sum = np.zeros((count, bins))
    w2_sum = np.zeros((count, bins))
    time = np.zeros((count, bins))
    labels = np.arange(bins)

    for k in range(paths.steps):
        y = paths.y_paths[:, k]
        dw1, dw2 = paths.w1_increments[:, k], paths.w2_increments[:, k]
        mask = (cells.cell_index(y)[:, None] == labels).astype(np.float64)
        rate = np.asarray(coeffs.rate(y), dtype=np.float64)
        excess = coeffs.excess(y)
        scale = np.asarray(coeffs.vol_scale(y), dtype=np.float64)
        theta = (excess @ sigma0_inv.T) / scale[:, None]

        rate_sum += rate * dt
        excess_sum += mask[..., None] * (
            excess * dt + scale[:, None] * (dw1 @ sigma0.T)
        )[:, None, :]
        nu_score += mask[..., None] * (
            ((dw1 + theta * dt) @ sigma0_inv) / scale[:, None]
        )[:, None, :]
        vol_sq_sum += mask * (scale**2 * dt)[:, None]
        sharpe_score += mask * (
            np.einsum("ij,ij->i", theta, dw1)
            + 0.5 * np.einsum("ij,ij->i", theta, theta) * dt
        )[:, None]
        inv_vol_sq_sum += mask * (dt / scale**2)[:, None]
        w2_sum += mask * dw2[:, None]
        time += mask * dt

    return BinnedStatistics(
        nodes=nodes,
        rate_sum=rate_sum,
        excess_sum=excess_sum,
        vol_sq_sum=vol_sq_sum,
        sharpe_score=sharpe_score,
        nu_score=nu_score,
        inv_vol_sq_sum=inv_vol_sq_sum,
        w2_sum=w2_sum,
        time=time,
        y_end=paths.y_end.copy(),
        cov0=sigma0 @ sigma0.T,
        prec0=sigma0_inv.T @ sigma0_inv,
        antithetic=paths.antithetic,
    )


def cell_nodes(paths: PathSet, bins: int) -> NDArray[np.float64]:
    """Equally spaced cell nodes over the central 90% of the visited factor range."""
    if bins < 1:
        raise ModelDomainError(f"Need at least one cell, got {bins}.")
    visited = paths.y_paths[:, :-1]
    if bins == 1:
        return np.array([float(np.mean(paths.y_paths[:, 0]))])
    low, high = np.quantile(visited, [0.05, 0.95])
    if not high > low:
        return np.array([float(low)])
    return np.linspace(low, high, bins)

"""
Utility side of the one-period problem.

The power investor's one-period reward combines the utility of the period's
wealth ratio with the continuation value A(y):

    h_A(x, y) = x^alpha h(y) / alpha + A(y) x^(alpha (1 - gamma)) / alpha

All powers are evaluated in log space. Functions accept scalars or arrays and
broadcast ``x`` (or ``u``) against ``y``.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import BracketError, ModelDomainError
from .grid import ValueGrid

logger = logging.getLogger(__name__)

FloatOrArray = Union[float, NDArray[np.float64]]

# --- Constants ---
BISECTION_MAX_ITER: int = 200
BISECTION_LOG_TOL: float = 1e-13
UTILITY_MODES = ("power", "log")


# --- Level functions h(y) ---
class LevelFunction(ABC):
    """Bounded weight h(y) of the period utility."""

    @abstractmethod
    def __call__(self, y: ArrayLike) -> FloatOrArray: ...

    @property
    @abstractmethod
    def lower(self) -> float:
        """Analytic infimum over the real line."""

    @property
    @abstractmethod
    def upper(self) -> float:
        """Analytic supremum over the real line."""


@dataclass(frozen=True)
class ConstantLevel(LevelFunction):
    value: float

    def __call__(self, y: ArrayLike) -> FloatOrArray:
        out = np.full(np.shape(y), float(self.value))
        return float(out) if out.ndim == 0 else out

    @property
    def lower(self) -> float:
        return float(self.value)

    @property
    def upper(self) -> float:
        return float(self.value)


@dataclass(frozen=True)
class SigmoidLevel(LevelFunction):
    """h(y) = low + (high - low) / (1 + exp(-slope (y - center)))."""

    low: float
    high: float
    slope: float = 1.0
    center: float = 0.0

    def __call__(self, y: ArrayLike) -> FloatOrArray:
        z = self.slope * (np.asarray(y, dtype=np.float64) - self.center)
        out = self.low + (self.high - self.low) * 0.5 * (1.0 + np.tanh(0.5 * z))
        return float(out) if np.ndim(out) == 0 else out

    @property
    def lower(self) -> float:
        return float(min(self.low, self.high))

    @property
    def upper(self) -> float:
        return float(max(self.low, self.high))


@dataclass(frozen=True)
class UtilitySpec:
    """
    Preferences of the periodic evaluation problem.

    Attributes:
        alpha: Power exponent, alpha < 1 and alpha != 0 (unused in log mode).
        gamma: Relative performance weight in (0, 1].
        rho: Discount rate (1/time), >= 0.
        tau: Evaluation period length (> 0).
        h: Level function with m <= h <= 1.
        mode: "power" or "log".
    """

    alpha: Optional[float]
    gamma: float
    rho: float
    tau: float
    h: LevelFunction
    mode: str = "power"

    def __post_init__(self):
        if self.mode not in UTILITY_MODES:
            raise ModelDomainError(f"Unknown utility mode '{self.mode}'.")
        if not 0.0 < self.gamma <= 1.0:
            raise ModelDomainError(f"gamma must lie in (0, 1], got {self.gamma}.")
        if self.rho < 0.0:
            raise ModelDomainError(f"rho must be >= 0, got {self.rho}.")
        if self.tau <= 0.0:
            raise ModelDomainError(f"tau must be > 0, got {self.tau}.")
        if self.mode == "power":
            if self.alpha is None or self.alpha == 0.0 or self.alpha >= 1.0:
                raise ModelDomainError(
                    f"Power utility needs alpha < 1, alpha != 0; got {self.alpha}."
                )

    @property
    def is_log(self) -> bool:
        return self.mode == "log"

    @property
    def continuation_exponent(self) -> float:
        """alpha (1 - gamma), the wealth exponent of the continuation value."""
        return 0.0 if self.is_log else self.alpha * (1.0 - self.gamma)


@dataclass(frozen=True)
class ModifiedUtility:
    """The reward h_A for a given continuation function A."""

    spec: UtilitySpec
    A: ValueGrid

    def __post_init__(self):
        if np.any(self.A.values < 0.0) and not self.spec.is_log:
            raise ModelDomainError("The continuation function A must be >= 0.")


def _positive(x: ArrayLike, name: str = "x") -> NDArray[np.float64]:
    arr = np.asarray(x, dtype=np.float64)
    if np.any(~(arr > 0.0)):
        raise ModelDomainError(f"{name} must be strictly positive.")
    return arr


def _scalar_or_array(out: NDArray[np.float64]) -> FloatOrArray:
    return float(out) if np.ndim(out) == 0 else out


def _require_power(mu: ModifiedUtility) -> Tuple[float, float, float]:
    spec = mu.spec
    if spec.is_log:
        raise ModelDomainError("h_A is defined for power utility only.")
    return spec.alpha, spec.gamma, spec.continuation_exponent


def h_A(mu: ModifiedUtility, x: ArrayLike, y: ArrayLike) -> FloatOrArray:
    """Modified utility ``x^a h(y) / a + A(y) x^(a(1-g)) / a``."""
    alpha, _, expo = _require_power(mu)
    log_x = np.log(_positive(x))
    value = (
        np.exp(alpha * log_x) * mu.spec.h(y) + mu.A(y) * np.exp(expo * log_x)
    ) / alpha
    return _scalar_or_array(value)


def marginal(mu: ModifiedUtility, x: ArrayLike, y: ArrayLike) -> FloatOrArray:
    """Derivative of h_A in x; strictly positive and decreasing."""
    alpha, gamma, expo = _require_power(mu)
    log_x = np.log(_positive(x))
    value = np.exp((alpha - 1.0) * log_x) * mu.spec.h(y) + mu.A(y) * (
        1.0 - gamma
    ) * np.exp((expo - 1.0) * log_x)
    return _scalar_or_array(value)


def second_derivative(mu: ModifiedUtility, x: ArrayLike, y: ArrayLike) -> FloatOrArray:
    alpha, gamma, expo = _require_power(mu)
    log_x = np.log(_positive(x))
    value = (alpha - 1.0) * np.exp((alpha - 2.0) * log_x) * mu.spec.h(y) + mu.A(
        y
    ) * (1.0 - gamma) * (expo - 1.0) * np.exp((expo - 2.0) * log_x)
    return _scalar_or_array(value)


def relative_risk_aversion(
    mu: ModifiedUtility, x: ArrayLike, y: ArrayLike
) -> FloatOrArray:
    """Arrow-Pratt measure ``-x h_A''(x) / h_A'(x)``."""
    x = _positive(x)
    value = -x * np.asarray(second_derivative(mu, x, y)) / np.asarray(
        marginal(mu, x, y)
    )
    return _scalar_or_array(value)


def _log_marginal(
    log_x: NDArray[np.float64],
    alpha: float,
    expo: float,
    log_h: NDArray[np.float64],
    log_c: NDArray[np.float64],
) -> NDArray[np.float64]:
    return np.logaddexp((alpha - 1.0) * log_x + log_h, (expo - 1.0) * log_x + log_c)


def inverse_marginal(mu: ModifiedUtility, u: ArrayLike, y: ArrayLike) -> FloatOrArray:
    """
    The inverse I(u, y) of the marginal utility.

    Bisection in log x. The bracket comes from the two power terms: the root
    lies above the point where either term alone equals u and below the
    point where both terms are at most u / 2.

    Raises:
        ModelDomainError: If u <= 0.
        BracketError: If the bracket is not finite.
    """
    alpha, gamma, expo = _require_power(mu)
    log_u = np.log(_positive(u, "u"))
    log_h = np.log(np.asarray(mu.spec.h(y), dtype=np.float64))
    log_u, log_h = np.broadcast_arrays(log_u, log_h)
    single = (log_u - log_h) / (alpha - 1.0)
    weight = np.broadcast_to(
        np.asarray(mu.A(y), dtype=np.float64) * (1.0 - gamma), log_u.shape
    )
    if not np.any(weight > 0.0):
        return _scalar_or_array(np.exp(single))

    with np.errstate(divide="ignore"):
        log_c = np.log(weight)
    half = (log_u - np.log(2.0) - log_h) / (alpha - 1.0)
    second = np.where(weight > 0.0, (log_u - log_c) / (expo - 1.0), -np.inf)
    second_half = np.where(
        weight > 0.0, (log_u - np.log(2.0) - log_c) / (expo - 1.0), -np.inf
    )
    lo = np.maximum(single, second)
    hi = np.maximum(half, second_half)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise BracketError("Inverse marginal bracket is not finite.")

    for _ in range(BISECTION_MAX_ITER):
        mid = 0.5 * (lo + hi)
        above = _log_marginal(mid, alpha, expo, log_h, log_c) > log_u
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
        if np.max(hi - lo) <= BISECTION_LOG_TOL:
            break
    return _scalar_or_array(np.exp(0.5 * (lo + hi)))


def legendre(
    mu: ModifiedUtility, u: ArrayLike, y: ArrayLike
) -> Tuple[FloatOrArray, FloatOrArray]:
    """
    Legendre-Fenchel transform of h_A.

    Returns:
        ``(phi, x_star)`` with ``x_star = I(u, y)`` and
        ``phi = h_A(x_star, y) - u x_star``.
    """
    x_star = np.asarray(inverse_marginal(mu, u, y))
    phi = np.asarray(h_A(mu, x_star, y)) - np.asarray(u) * x_star
    return _scalar_or_array(phi), _scalar_or_array(x_star)


def ell(mu: ModifiedUtility, x: ArrayLike, y: ArrayLike) -> FloatOrArray:
    """``h_A(x) - x h_A'(x)``, increasing in x."""
    alpha, gamma, expo = _require_power(mu)
    log_x = np.log(_positive(x))
    value = (1.0 / alpha - 1.0) * np.exp(alpha * log_x) * mu.spec.h(y) + (
        1.0 / alpha - (1.0 - gamma)
    ) * mu.A(y) * np.exp(expo * log_x)
    return _scalar_or_array(value)


def growth_constants(mu: ModifiedUtility) -> Tuple[float, float]:
    """
    Constants of the growth bound of h_A.

    For alpha in (0, 1): ``0 < h_A(x) <= kappa (1 + x^rho)``; for alpha < 0:
    ``0 > h_A(x) >= kappa (1 + x^rho)``. Both use
    ``kappa = 2 max(1, sup A) / alpha`` and ``rho = alpha``.
    """
    alpha, _, _ = _require_power(mu)
    return 2.0 / alpha * max(1.0, mu.A.sup), alpha


def scaled_marginal_factor(spec: UtilitySpec, varrho: float) -> float:
    """``varrho^(alpha-1) v varrho^(alpha(1-gamma)-1)`` for varrho > 1."""
    if varrho <= 1.0:
        raise ModelDomainError(f"varrho must exceed 1, got {varrho}.")
    expo = spec.continuation_exponent
    return max(varrho ** (spec.alpha - 1.0), varrho ** (expo - 1.0))


# --- Terminal problem dispatch (power reward or logarithmic growth) ---
def terminal_utility(mu: ModifiedUtility, x: ArrayLike, y: ArrayLike) -> FloatOrArray:
    """Reward of the one-period terminal problem: h_A, or log x in log mode."""
    if mu.spec.is_log:
        return _scalar_or_array(np.log(_positive(x)) + np.zeros(np.shape(y)))
    return h_A(mu, x, y)


def conjugate(
    mu: ModifiedUtility, u: ArrayLike, y: ArrayLike
) -> Tuple[FloatOrArray, FloatOrArray]:
    """Conjugate and maximiser of the terminal reward.

    Log mode uses ``Phi(u) = -log u - 1`` and ``x*(u) = 1 / u``.
    """
    if mu.spec.is_log:
        u = _positive(u, "u")
        shape = np.broadcast_shapes(np.shape(u), np.shape(y))
        phi = np.broadcast_to(-np.log(u) - 1.0, shape)
        x_star = np.broadcast_to(1.0 / u, shape)
        return _scalar_or_array(np.array(phi)), _scalar_or_array(np.array(x_star))
    return legendre(mu, u, y)

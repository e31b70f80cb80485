"""
Convex trading constraints.

A constraint set K holds the admissible portfolio proportions. Its support
function ``delta(x) = sup_{pi in K} (-pi^T x)`` and barrier cone
``K~ = {x : delta(x) < inf}`` enter the dual side; the projection onto K
drives the primal policy search. Every built-in kind contains 0, so
``delta >= 0`` and ``delta(0) = 0``.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import optimize

from .errors import (
    ConvergenceError,
    ModelDomainError,
    SingularVolatilityError,
)

logger = logging.getLogger(__name__)

# --- Constants ---
ZERO_TOL: float = 1e-12
PROJECTION_TOL: float = 1e-10
PROJECTION_MAX_ITER: int = 10_000
NU_STAR_TOL: float = 1e-13
NU_STAR_TOL_ITERATIVE: float = 1e-9
NU_STAR_MAX_ITER: int = 200_000


class ConstraintKind(str, Enum):
    UNCONSTRAINED = "unconstrained"
    NO_SHORT = "no_short"
    BORROW_CAP = "borrow_cap"
    NO_SHORT_BORROW_CAP = "no_short_borrow_cap"
    BOX = "box"
    HALFSPACES = "halfspaces"


class SupportValue(NamedTuple):
    """Value of the support function; ``finite`` is False outside K~."""

    value: float
    finite: bool


@dataclass(frozen=True)
class ConstraintSet:
    """
    A nonempty closed convex set of portfolio proportions in R^n.

    Attributes:
        kind: Which closed form applies.
        n: Number of risky assets.
        a: Cap on the total risky proportion (borrow-cap kinds).
        lo, hi: Componentwise bounds (box kind), with lo <= 0 <= hi.
        normals, offsets: Rows of ``normals @ pi <= offsets`` (halfspace
            kind), with offsets >= 0.
    """

    kind: ConstraintKind
    n: int
    a: Optional[float] = None
    lo: Optional[NDArray[np.float64]] = None
    hi: Optional[NDArray[np.float64]] = None
    normals: Optional[NDArray[np.float64]] = None
    offsets: Optional[NDArray[np.float64]] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ConstraintKind(self.kind))
        if self.n < 1:
            raise ModelDomainError(f"Dimension must be positive, got {self.n}.")
        if self.kind in (
            ConstraintKind.BORROW_CAP,
            ConstraintKind.NO_SHORT_BORROW_CAP,
        ):
            if self.a is None or self.a < 0.0:
                raise ModelDomainError(
                    f"{self.kind.value} needs a cap a >= 0, got {self.a}."
                )
        if self.kind is ConstraintKind.BOX:
            lo = np.asarray(self.lo, dtype=np.float64).reshape(self.n)
            hi = np.asarray(self.hi, dtype=np.float64).reshape(self.n)
            if np.any(lo > 0.0) or np.any(hi < 0.0):
                raise ModelDomainError("Box bounds must satisfy lo <= 0 <= hi.")
            object.__setattr__(self, "lo", lo)
            object.__setattr__(self, "hi", hi)
        if self.kind is ConstraintKind.HALFSPACES:
            normals = np.atleast_2d(np.asarray(self.normals, dtype=np.float64))
            offsets = np.atleast_1d(np.asarray(self.offsets, dtype=np.float64))
            if normals.shape != (offsets.size, self.n):
                raise ModelDomainError(
                    f"Halfspace normals have shape {normals.shape}, "
                    f"expected ({offsets.size}, {self.n})."
                )
            if np.any(offsets < 0.0):
                raise ModelDomainError("Halfspace offsets must be >= 0.")
            if np.any(np.linalg.norm(normals, axis=1) == 0.0):
                raise ModelDomainError("Halfspace normals must be nonzero.")
            object.__setattr__(self, "normals", normals)
            object.__setattr__(self, "offsets", offsets)

    # --- Constructors ---
    @classmethod
    def unconstrained(cls, n: int) -> "ConstraintSet":
        return cls(ConstraintKind.UNCONSTRAINED, n)

    @classmethod
    def no_short(cls, n: int) -> "ConstraintSet":
        return cls(ConstraintKind.NO_SHORT, n)

    @classmethod
    def borrow_cap(cls, n: int, a: float) -> "ConstraintSet":
        return cls(ConstraintKind.BORROW_CAP, n, a=float(a))

    @classmethod
    def no_short_borrow_cap(cls, n: int, a: float) -> "ConstraintSet":
        return cls(ConstraintKind.NO_SHORT_BORROW_CAP, n, a=float(a))

    @classmethod
    def box(cls, lo: ArrayLike, hi: ArrayLike) -> "ConstraintSet":
        lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
        return cls(ConstraintKind.BOX, lo.size, lo=lo, hi=hi)

    @classmethod
    def halfspaces(cls, normals: ArrayLike, offsets: ArrayLike) -> "ConstraintSet":
        normals = np.atleast_2d(np.asarray(normals, dtype=np.float64))
        return cls(
            ConstraintKind.HALFSPACES,
            normals.shape[1],
            normals=normals,
            offsets=offsets,
        )

    @property
    def delta0(self) -> float:
        """Certified lower bound of delta on R^n (0 since 0 lies in K)."""
        return 0.0


def _as_vector(K: ConstraintSet, x: ArrayLike) -> NDArray[np.float64]:
    vec = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if vec.shape != (K.n,):
        raise ModelDomainError(
            f"Expected a vector of length {K.n}, got shape {vec.shape}."
        )
    return vec


def _tol(x: NDArray[np.float64]) -> float:
    return ZERO_TOL * max(1.0, float(np.max(np.abs(x))))


def support_delta(K: ConstraintSet, x: ArrayLike) -> SupportValue:
    """
    Support function ``delta(x|K) = sup_{pi in K} (-pi^T x)``.

    Args:
        K: The constraint set.
        x: Vector of length n.

    Returns:
        SupportValue with ``finite=False`` when x lies outside K~.
    """
    x = _as_vector(K, x)
    tol = _tol(x)
    kind = K.kind
    if kind is ConstraintKind.UNCONSTRAINED:
        return SupportValue(0.0, bool(np.all(np.abs(x) <= tol)))
    if kind is ConstraintKind.NO_SHORT:
        return SupportValue(0.0, bool(np.all(x >= -tol)))
    if kind is ConstraintKind.BORROW_CAP:
        # K~ is the ray {-t 1 : t >= 0}
        t = -float(np.mean(x))
        finite = t >= -tol and bool(np.all(np.abs(x + t) <= tol))
        return SupportValue(K.a * max(t, 0.0), finite)
    if kind is ConstraintKind.NO_SHORT_BORROW_CAP:
        return SupportValue(K.a * max(0.0, float(np.max(-x))), True)
    if kind is ConstraintKind.BOX:
        return SupportValue(float(np.sum(np.maximum(-K.lo * x, -K.hi * x))), True)
    if not np.any(x):
        return SupportValue(0.0, True)
    result = optimize.linprog(
        c=x,
        A_ub=K.normals,
        b_ub=K.offsets,
        bounds=[(None, None)] * K.n,
        method="highs",
    )
    if result.status == 3:
        return SupportValue(0.0, False)
    if result.status != 0:
        raise ConvergenceError(
            f"Support function LP failed with status {result.status}: "
            f"{result.message}"
        )
    return SupportValue(max(-float(result.fun), 0.0), True)


def in_barrier_cone(K: ConstraintSet, x: ArrayLike) -> bool:
    """True iff ``delta(x|K)`` is finite."""
    return support_delta(K, x).finite


def _project_simplex_cap(pi: NDArray[np.float64], a: float) -> NDArray[np.float64]:
    clipped = np.maximum(pi, 0.0)
    if clipped.sum() <= a:
        return clipped
    if a == 0.0:
        return np.zeros_like(pi)
    u = np.sort(pi)[::-1]
    css = np.cumsum(u)
    ranks = np.arange(1, pi.size + 1)
    active = np.nonzero(u - (css - a) / ranks > 0.0)[0]
    rho = int(active[-1])
    shift = (css[rho] - a) / (rho + 1)
    return np.maximum(pi - shift, 0.0)


def _project_halfspaces(
    K: ConstraintSet, pi: NDArray[np.float64]
) -> NDArray[np.float64]:
    # Dykstra's alternating projections; converges to the Euclidean projection
    normals, offsets = K.normals, K.offsets
    norms_sq = np.einsum("ij,ij->i", normals, normals)
    x = pi.copy()
    corrections = np.zeros_like(normals)
    for iteration in range(PROJECTION_MAX_ITER):
        x_prev = x
        for i in range(offsets.size):
            y = x + corrections[i]
            excess = normals[i] @ y - offsets[i]
            x = y - max(excess, 0.0) / norms_sq[i] * normals[i]
            corrections[i] = y - x
        if np.linalg.norm(x - x_prev) <= PROJECTION_TOL:
            logger.debug(f"Halfspace projection converged in {iteration + 1} passes.")
            return x
    raise ConvergenceError(
        f"Halfspace projection did not converge in {PROJECTION_MAX_ITER} passes."
    )


def project_K(K: ConstraintSet, pi: ArrayLike) -> NDArray[np.float64]:
    """Euclidean projection of ``pi`` onto K."""
    pi = _as_vector(K, pi)
    kind = K.kind
    if kind is ConstraintKind.UNCONSTRAINED:
        return pi.copy()
    if kind is ConstraintKind.NO_SHORT:
        return np.maximum(pi, 0.0)
    if kind is ConstraintKind.BORROW_CAP:
        excess = pi.sum() - K.a
        return pi - max(excess, 0.0) / K.n
    if kind is ConstraintKind.NO_SHORT_BORROW_CAP:
        return _project_simplex_cap(pi, K.a)
    if kind is ConstraintKind.BOX:
        return np.clip(pi, K.lo, K.hi)
    if np.all(K.normals @ pi <= K.offsets):
        return pi.copy()
    return _project_halfspaces(K, pi)


def distance_to_K(K: ConstraintSet, pi: ArrayLike) -> float:
    pi = _as_vector(K, pi)
    return float(np.linalg.norm(project_K(K, pi) - pi))


def contains(K: ConstraintSet, pi: ArrayLike, tol: float = 1e-8) -> bool:
    return distance_to_K(K, pi) <= tol


def project_barrier_cone(K: ConstraintSet, x: ArrayLike) -> NDArray[np.float64]:
    """Euclidean projection onto the barrier cone K~."""
    x = _as_vector(K, x)
    kind = K.kind
    if kind is ConstraintKind.UNCONSTRAINED:
        return np.zeros_like(x)
    if kind is ConstraintKind.NO_SHORT:
        return np.maximum(x, 0.0)
    if kind is ConstraintKind.BORROW_CAP:
        t = max(0.0, -float(np.mean(x)))
        return np.full_like(x, -t)
    if kind in (ConstraintKind.NO_SHORT_BORROW_CAP, ConstraintKind.BOX):
        return x.copy()
    # K~ = {-normals^T w : w >= 0}
    weights, _ = optimize.nnls(K.normals.T, -x)
    return -K.normals.T @ weights


def _prox_support(
    K: ConstraintSet, v: NDArray[np.float64], t: float
) -> NDArray[np.float64]:
    # Moreau: prox_{t delta}(v) = v + t P_K(-v / t)
    return v + t * project_K(K, -v / t)


def _minimize_support_quadratic(
    K: ConstraintSet,
    theta: ArrayLike,
    sigma: ArrayLike,
    weight: float,
) -> NDArray[np.float64]:
    """argmin over K~ of ``|theta + sigma^{-1} nu|^2 + weight * delta(nu)``."""
    theta = _as_vector(K, theta)
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    try:
        sigma_inv = np.linalg.inv(sigma)
    except np.linalg.LinAlgError as e:
        raise SingularVolatilityError(f"Volatility matrix is singular: {e}") from e
    lipschitz = 2.0 * np.linalg.norm(sigma_inv, ord=2) ** 2
    step = 1.0 / lipschitz
    nu = np.zeros(K.n)
    if K.kind is ConstraintKind.UNCONSTRAINED:
        return nu
    tol = (
        NU_STAR_TOL_ITERATIVE
        if K.kind is ConstraintKind.HALFSPACES
        else NU_STAR_TOL
    )
    for iteration in range(NU_STAR_MAX_ITER):
        gradient = 2.0 * sigma_inv.T @ (theta + sigma_inv @ nu)
        nu_next = _prox_support(K, nu - step * gradient, step * weight)
        moved = np.linalg.norm(nu_next - nu)
        nu = nu_next
        if moved <= tol * max(1.0, np.linalg.norm(nu)):
            logger.debug(f"nu* converged after {iteration + 1} iterations.")
            return project_barrier_cone(K, nu)
    raise ConvergenceError(
        f"nu* solver did not converge in {NU_STAR_MAX_ITER} iterations."
    )


def nu_star_log(
    K: ConstraintSet, theta: ArrayLike, sigma: ArrayLike
) -> NDArray[np.float64]:
    """Constraint parameter of the logarithmic investor.

    Minimises ``2 delta(nu) + |theta + sigma^{-1} nu|^2`` over K~.
    """
    return _minimize_support_quadratic(K, theta, sigma, 2.0)


def nu_star_power_gamma1(
    K: ConstraintSet, theta: ArrayLike, sigma: ArrayLike, alpha: float
) -> NDArray[np.float64]:
    """Constraint parameter of the power investor when gamma = 1.

    Minimises ``|theta + sigma^{-1} nu|^2 + 2 (1 - alpha) delta(nu)`` over K~.
    """
    if not alpha < 1.0:
        raise ModelDomainError(f"alpha must be < 1, got {alpha}.")
    return _minimize_support_quadratic(K, theta, sigma, 2.0 * (1.0 - alpha))

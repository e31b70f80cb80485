"""Grid-valued functions of the factor level."""

from dataclasses import dataclass, field
from typing import Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ModelDomainError

FloatOrArray = Union[float, NDArray[np.float64]]


def _strictly_increasing(nodes: NDArray[np.float64]) -> bool:
    return bool(np.all(np.diff(nodes) > 0.0))


@dataclass(frozen=True)
class ValueGrid:
    """
    A function y -> A(y) stored on sorted nodes.

    Between nodes the function is linear, beyond the end nodes it is
    constant. Values must be non-negative unless ``allow_negative`` is set
    (the logarithmic pathway can produce negative levels).
    """

    y_nodes: NDArray[np.float64]
    values: NDArray[np.float64]
    allow_negative: bool = False

    def __post_init__(self):
        nodes = np.atleast_1d(np.asarray(self.y_nodes, dtype=np.float64))
        values = np.atleast_1d(np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "y_nodes", nodes)
        object.__setattr__(self, "values", values)
        if nodes.shape != values.shape:
            raise ModelDomainError(
                f"Grid has {nodes.size} nodes but {values.size} values."
            )
        if not _strictly_increasing(nodes):
            raise ModelDomainError("Grid nodes must be strictly increasing.")
        if not np.all(np.isfinite(values)):
            raise ModelDomainError("Grid values must be finite.")
        if not self.allow_negative and np.any(values < 0.0):
            raise ModelDomainError(
                f"Grid values must be non-negative, min={values.min():.3e}."
            )

    @classmethod
    def constant(
        cls, y_nodes: ArrayLike, level: float, allow_negative: bool = False
    ) -> "ValueGrid":
        nodes = np.asarray(y_nodes, dtype=np.float64)
        return cls(nodes, np.full(nodes.shape, float(level)), allow_negative)

    def __call__(self, y: ArrayLike) -> FloatOrArray:
        out = np.interp(np.asarray(y, dtype=np.float64), self.y_nodes, self.values)
        return float(out) if np.ndim(out) == 0 else out

    def with_values(self, values: ArrayLike) -> "ValueGrid":
        return ValueGrid(self.y_nodes, values, self.allow_negative)

    def distance(self, other: "ValueGrid") -> float:
        """Sup-norm distance over the union of both node sets."""
        nodes = np.union1d(self.y_nodes, other.y_nodes)
        return float(np.max(np.abs(self(nodes) - other(nodes))))

    @property
    def sup(self) -> float:
        return float(np.max(self.values))

    @property
    def inf(self) -> float:
        return float(np.min(self.values))


@dataclass(frozen=True)
class GridFeedback:
    """
    Piecewise-constant feedback map y -> value in R^k.

    Node ``j`` owns the cell between the midpoints to its neighbours; the end
    cells extend to infinity.
    """

    y_nodes: NDArray[np.float64]
    values: NDArray[np.float64]
    _edges: NDArray[np.float64] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        nodes = np.atleast_1d(np.asarray(self.y_nodes, dtype=np.float64))
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values.reshape(nodes.size, -1)
        object.__setattr__(self, "y_nodes", nodes)
        object.__setattr__(self, "values", values)
        if values.shape[0] != nodes.size:
            raise ModelDomainError(
                f"Feedback has {nodes.size} nodes but {values.shape[0]} rows."
            )
        if not _strictly_increasing(nodes):
            raise ModelDomainError("Feedback nodes must be strictly increasing.")
        object.__setattr__(self, "_edges", 0.5 * (nodes[1:] + nodes[:-1]))

    @classmethod
    def constant(cls, value: ArrayLike, y_node: float = 0.0) -> "GridFeedback":
        row = np.atleast_1d(np.asarray(value, dtype=np.float64))
        return cls(np.array([y_node]), row.reshape(1, -1))

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    def cell_index(self, y: ArrayLike) -> NDArray[np.intp]:
        return np.searchsorted(self._edges, np.asarray(y, dtype=np.float64))

    def __call__(self, y: ArrayLike) -> NDArray[np.float64]:
        """Values at ``y``; shape ``(*y.shape, k)``."""
        return self.values[self.cell_index(y)]

    def with_row(self, index: int, row: ArrayLike) -> "GridFeedback":
        values = self.values.copy()
        values[index] = np.asarray(row, dtype=np.float64)
        return GridFeedback(self.y_nodes, values)


def build_factor_grid(
    center: float, spread: float, nodes: int, width: float = 5.0
) -> NDArray[np.float64]:
    """Equally spaced nodes on ``[center - width*spread, center + width*spread]``."""
    if nodes < 1:
        raise ModelDomainError(f"Grid needs at least one node, got {nodes}.")
    if nodes == 1 or spread <= 0.0:
        return np.array([float(center)])
    return np.linspace(center - width * spread, center + width * spread, nodes)

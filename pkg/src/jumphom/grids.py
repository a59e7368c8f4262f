"""Uniform grids on the flat torus and the fields living on them.

Conventions used throughout the package:

* a grid has ``n`` points per dimension on ``[0, period)``, ``d in {1, 2}``,
  and ``N = n**d`` points total, flattened in row-major order;
* scalar fields are arrays of shape ``(N,)``, vector fields ``(N, d)``,
  matrix fields ``(N, d, d)``;
* integrals over the torus are rectangle-rule sums weighted by ``h**d``
  with ``h = period / n`` (spectrally accurate for the smooth periodic
  data this package produces).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid with ``n`` points per dimension on ``[0, period)^d``."""

    n: int
    dim: int = 1
    period: float = 1.0

    def __post_init__(self):
        if self.n < 4:
            raise ValueError("grid needs at least 4 points per dimension")
        if self.dim not in (1, 2):
            raise ValueError("only dimensions 1 and 2 are supported")
        if self.period <= 0:
            raise ValueError("period must be positive")

    @property
    def size(self) -> int:
        return self.n**self.dim

    @property
    def h(self) -> float:
        return self.period / self.n

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    def points(self) -> np.ndarray:
        """Grid points, shape ``(N, d)``."""
        axis = np.arange(self.n) * self.h
        if self.dim == 1:
            return axis[:, None]
        xx, yy = np.meshgrid(axis, axis, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)

    def displacement_index(self) -> np.ndarray:
        """Index matrix mapping (i, j) to the grid index of point_i - point_j.

        Lets circulant data tabulated per displacement be expanded to a
        dense (N, N) matrix via ``table[grid.displacement_index()]``.
        """
        idx = np.arange(self.n)
        diff = (idx[:, None] - idx[None, :]) % self.n
        if self.dim == 1:
            return diff
        flat = diff.reshape(self.n, self.n)
        comb = (
            flat[:, None, :, None] * self.n + flat[None, :, None, :]
        )  # (i1, j1, i2, j2) -> displacement in flattened order
        return comb.reshape(self.size, self.size)

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Rectangle-rule integral over the torus (first axis is the grid)."""
        return values.sum(axis=0) * self.cell_volume

    def mean(self, values: np.ndarray) -> np.ndarray:
        return values.mean(axis=0)

    def l2_norm(self, values: np.ndarray) -> float:
        return float(np.sqrt(np.sum(np.abs(values) ** 2) * self.cell_volume))


@dataclass(frozen=True)
class TorusField:
    """A scalar, vector, or matrix valued function sampled on a TorusGrid."""

    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape[0] != self.grid.size:
            raise ValueError(
                f"field has {self.values.shape[0]} samples, grid has {self.grid.size}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    @property
    def mass(self) -> np.ndarray:
        return self.grid.integrate(self.values)

    def l2_norm(self) -> float:
        return self.grid.l2_norm(self.values)


@dataclass
class FieldTrajectory:
    """Fields recorded at a finite set of sample times.

    ``values[k]`` is the field at ``times[k]``; trailing axes follow the
    field-shape conventions of this module.
    """

    grid: TorusGrid
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values)
        if self.values.shape[0] != self.times.shape[0]:
            raise DimensionError(
                f"{self.values.shape[0]} fields for {self.times.shape[0]} times"
            )

    def __len__(self) -> int:
        return len(self.times)

    def at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise DimensionError(f"time {t} not among sample times")
        return self.values[k]

    def sup_l2_difference(self, other: "FieldTrajectory") -> float:
        if len(self) != len(other) or not np.allclose(self.times, other.times):
            raise DimensionError("trajectories sampled at different times")
        diffs = [
            self.grid.l2_norm(self.values[k] - other.values[k])
            for k in range(len(self))
        ]
        return float(max(diffs))


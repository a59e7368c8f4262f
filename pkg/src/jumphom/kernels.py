"""Dispersal densities and their periodized moment kernels.

The nonlocal generator only ever sees the dispersal density a(z) through
its lattice-wrapped moments on the torus,

    M0(z) = sum_k a(z + k*P),
    M1(z) = sum_k (z + k*P) a(z + k*P),
    M2(z) = sum_k (z + k*P) (x) (z + k*P) a(z + k*P),

tabulated on the displacement grid of an n-point torus of period P.  The
lattice sum is truncated at a radius where the omitted mass and second
moment are below ``tail_tolerance``.  Displacements are represented by
their signed representative in (-P/2, P/2] so that even densities give
exactly even M0 and exactly odd M1 up to rounding.

``assemble_generator`` turns a moment table plus a rate slice mu(xi, eta)
into the dense jump matrix K and its row-sum diagonal G; the generator
acts as ``A v = K v - G * v`` and its adjoint as ``A* p = K^T p - G * p``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, DimensionError
from .grids import TorusGrid

_FAMILIES = ("gaussian", "shifted_gaussian", "compact_bump")


@dataclass(frozen=True)
class DispersalKernel:
    """Jump-displacement density with unit mass and finite second moment.

    ``width`` is the isotropic standard deviation for the Gaussian
    families and the support radius for the compactly supported bump.
    ``center`` shifts the density; the plain ``gaussian`` family pins it
    to the origin.
    """

    family: str
    dim: int = 1
    width: float = 0.2
    center: tuple = (0.0,)

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ConfigurationError(f"unknown kernel family {self.family!r}")
        if self.dim not in (1, 2):
            raise ConfigurationError("kernel dimension must be 1 or 2")
        if self.width <= 0:
            raise ConfigurationError("kernel width must be positive")
        if len(self.center) != self.dim:
            raise ConfigurationError("kernel center has wrong dimension")
        if self.family == "gaussian" and any(c != 0.0 for c in self.center):
            raise ConfigurationError("gaussian family is centered; use shifted_gaussian")

    @property
    def center_vec(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)

    def density(self, z: np.ndarray) -> np.ndarray:
        """a(z) for points of shape (..., d)."""
        z = np.asarray(z, dtype=float)
        r2 = np.sum((z - self.center_vec) ** 2, axis=-1)
        if self.family in ("gaussian", "shifted_gaussian"):
            w2 = self.width**2
            return np.exp(-0.5 * r2 / w2) / (2.0 * math.pi * w2) ** (self.dim / 2.0)
        # smooth bump: C * exp(-1/(1-(r/width)^2)) on r < width
        u = r2 / self.width**2
        out = np.zeros_like(r2)
        inside = u < 1.0
        out[inside] = np.exp(-1.0 / (1.0 - u[inside]))
        return out * self._bump_norm

    @cached_property
    def _bump_norm(self) -> float:
        if self.family != "compact_bump":
            return 1.0
        # one-time Gauss-Legendre normalization over the support
        nodes, weights = np.polynomial.legendre.leggauss(400 if self.dim == 1 else 160)
        half = self.width
        if self.dim == 1:
            x = nodes * half
            vals = np.exp(-1.0 / np.maximum(1.0 - (x / half) ** 2, 1e-300))
            vals[np.abs(x) >= half] = 0.0
            raw = float(np.sum(weights * vals) * half)
        else:
            x = nodes * half
            xx, yy = np.meshgrid(x, x, indexing="ij")
            u = (xx**2 + yy**2) / half**2
            vals = np.where(u < 1.0, np.exp(-1.0 / np.maximum(1.0 - u, 1e-300)), 0.0)
            raw = float(weights @ vals @ weights * half * half)
        return 1.0 / raw

    def first_moment(self) -> np.ndarray:
        """Analytic ∫ z a(z) dz (the bump and Gaussians are symmetric about center)."""
        return self.center_vec.copy()

    def second_moment(self) -> np.ndarray:
        """Analytic ∫ z (x) z a(z) dz as a (d, d) matrix."""
        m0 = self.center_vec
        if self.family in ("gaussian", "shifted_gaussian"):
            return self.width**2 * np.eye(self.dim) + np.outer(m0, m0)
        return self._bump_radial_second * np.eye(self.dim) + np.outer(m0, m0)

    @cached_property
    def _bump_radial_second(self) -> float:
        # ∫ (z - c)_i^2 a dz for the bump, by the same quadrature as the norm
        nodes, weights = np.polynomial.legendre.leggauss(400 if self.dim == 1 else 160)
        half = self.width
        if self.dim == 1:
            x = nodes * half
            vals = np.exp(-1.0 / np.maximum(1.0 - (x / half) ** 2, 1e-300))
            vals[np.abs(x) >= half] = 0.0
            return float(np.sum(weights * vals * x**2) * half) * self._bump_norm
        x = nodes * half
        xx, yy = np.meshgrid(x, x, indexing="ij")
        u = (xx**2 + yy**2) / half**2
        vals = np.where(u < 1.0, np.exp(-1.0 / np.maximum(1.0 - u, 1e-300)), 0.0)
        return float(weights @ (vals * xx**2) @ weights * half * half) * self._bump_norm

    def lattice_radius(self, period: float, tail_tolerance: float) -> int:
        """Number of lattice shifts needed so omitted mass/2nd moment < tolerance."""
        if self.family == "compact_bump":
            reach = self.width + float(np.max(np.abs(self.center_vec)))
        else:
            # Gaussian tail: q sigmas leave mass ~exp(-q^2/2); pad for the
            # |z|^2 weight and the d=2 angular factor.
            q = math.sqrt(2.0 * math.log(1.0 / tail_tolerance)) + 6.0
            reach = q * self.width + float(np.max(np.abs(self.center_vec)))
        return max(1, int(math.ceil((reach + 0.5 * period) / period)))


@dataclass(frozen=True)
class PeriodizedMoments:
    """Moment kernels M0, M1, M2 tabulated on the displacement grid.

    ``m0`` has shape (N,), ``m1`` (N, d), ``m2`` (N, d, d) where N is the
    grid size; entry ``m`` corresponds to the signed representative of the
    m-th displacement.  ``abs_moment1`` is the lattice-quadrature value of
    ∫ |z| a(z) dz, kept as data for a-priori drift bounds.
    """

    grid: TorusGrid
    m0: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    abs_moment1: float
    tail_tolerance: float

    @property
    def dim(self) -> int:
        return self.grid.dim

    def mass_quadrature(self) -> float:
        return float(self.grid.integrate(self.m0))

    def mean_quadrature(self) -> np.ndarray:
        return self.grid.integrate(self.m1)

    def second_quadrature(self) -> np.ndarray:
        return self.grid.integrate(self.m2)

    @cached_property
    def m0_matrix(self) -> np.ndarray:
        return self.m0[self.grid.displacement_index()]

    @cached_property
    def m1_matrices(self) -> np.ndarray:
        """Shape (d, N, N): component i of M1 at xi - eta."""
        di = self.grid.displacement_index()
        return np.stack([self.m1[:, i][di] for i in range(self.dim)], axis=0)

    @cached_property
    def m2_matrices(self) -> np.ndarray:
        """Shape (d, d, N, N)."""
        di = self.grid.displacement_index()
        return np.stack(
            [
                np.stack([self.m2[:, i, j][di] for j in range(self.dim)], axis=0)
                for i in range(self.dim)
            ],
            axis=0,
        )


def signed_displacements(grid: TorusGrid) -> np.ndarray:
    """Signed representative in (-P/2, P/2] of each displacement, shape (N, d)."""
    reps = np.arange(grid.n) * grid.h
    reps = np.where(reps > grid.period / 2.0, reps - grid.period, reps)
    if grid.dim == 1:
        return reps[:, None]
    xx, yy = np.meshgrid(reps, reps, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def periodize(
    kernel: DispersalKernel,
    n: int,
    tail_tolerance: float = 1e-12,
    period: float = 1.0,
) -> PeriodizedMoments:
    """Wrap the dispersal density over the period lattice and tabulate moments."""
    if n < 4:
        raise ConfigurationError("periodization grid needs n >= 4")
    if tail_tolerance <= 0:
        raise ConfigurationError("tail_tolerance must be positive")
    grid = TorusGrid(n=n, dim=kernel.dim, period=period)
    disp = signed_displacements(grid)  # (N, d)
    radius = kernel.lattice_radius(period, tail_tolerance)
    shift_axis = np.arange(-radius, radius + 1) * period
    if kernel.dim == 1:
        shifts = shift_axis[:, None]
    else:
        sx, sy = np.meshgrid(shift_axis, shift_axis, indexing="ij")
        shifts = np.stack([sx.ravel(), sy.ravel()], axis=1)
    pts = disp[:, None, :] + shifts[None, :, :]  # (N, S, d)
    dens = kernel.density(pts)  # (N, S)
    m0 = dens.sum(axis=1)
    m1 = np.einsum("nsd,ns->nd", pts, dens)
    m2 = np.einsum("nsd,nse,ns->nde", pts, pts, dens)
    abs1 = float(grid.integrate(np.einsum("ns,ns->n", np.linalg.norm(pts, axis=-1), dens)))
    return PeriodizedMoments(
        grid=grid, m0=m0, m1=m1, m2=m2, abs_moment1=abs1, tail_tolerance=tail_tolerance
    )


@dataclass(frozen=True)
class GeneratorPair:
    """Dense jump matrix K and its row-sum diagonal G on a common grid.

    ``apply`` evaluates A v = K v - G*v, the torus quadrature of
    ∫ (v(xi - z) - v(xi)) a(z) mu(xi, xi - z) dz; ``apply_adjoint``
    evaluates A* p = K^T p - G*p.  Row sums of K equal G by construction,
    so constants are annihilated by A and the adjoint conserves mass.
    """

    grid: TorusGrid
    K: np.ndarray
    G: np.ndarray

    @cached_property
    def KT(self) -> np.ndarray:
        return np.ascontiguousarray(self.K.T)

    def apply(self, v: np.ndarray) -> np.ndarray:
        if v.ndim == 1:
            return self.K @ v - self.G * v
        return self.K @ v - self.G[:, None] * v

    def apply_adjoint(self, p: np.ndarray) -> np.ndarray:
        if p.ndim == 1:
            return self.KT @ p - self.G * p
        return self.KT @ p - self.G[:, None] * p

    def matrix(self) -> np.ndarray:
        return self.K - np.diag(self.G)

    def adjoint_matrix(self) -> np.ndarray:
        return self.KT - np.diag(self.G)

    def infinity_norm(self) -> float:
        return float(np.max(np.sum(np.abs(self.matrix()), axis=1)))


def assemble_generator(moments: PeriodizedMoments, mu_slice: np.ndarray) -> GeneratorPair:
    """Assemble the dense generator for one rate slice mu(xi, eta).

    ``mu_slice`` must be an (N, N) array on the same grid as ``moments``
    with entries in the positive rate band.
    """
    grid = moments.grid
    mu_slice = np.asarray(mu_slice, dtype=float)
    if mu_slice.shape != (grid.size, grid.size):
        raise DimensionError(
            f"mu slice shape {mu_slice.shape} does not match grid size {grid.size}"
        )
    K = moments.m0_matrix * mu_slice * grid.cell_volume
    G = K.sum(axis=1)
    return GeneratorPair(grid=grid, K=K, G=G)

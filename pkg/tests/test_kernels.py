import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jumphom.errors import ConfigurationError, DimensionError
from jumphom.grids import TorusGrid
from jumphom.kernels import DispersalKernel, assemble_generator, periodize

from oracles import fine_quadrature_apply


@pytest.mark.parametrize("n", [32, 64, 128])
@pytest.mark.parametrize(
    "kernel,tol",
    [
        (DispersalKernel("gaussian", dim=1, width=0.25), 1e-10),
        (DispersalKernel("shifted_gaussian", dim=1, width=0.25, center=(0.3,)), 1e-10),
        # the bump's derivatives blow up at the support edge, so the
        # rectangle rule converges more slowly than for Gaussians
        (DispersalKernel("compact_bump", dim=1, width=0.6, center=(0.1,)), 1e-5),
    ],
    ids=["gaussian", "shifted", "bump"],
)
def test_moment_consistency(kernel, tol, n):
    mom = periodize(kernel, n)
    assert abs(mom.mass_quadrature() - 1.0) < tol
    assert np.max(np.abs(mom.mean_quadrature() - kernel.first_moment())) < tol
    assert (
        abs(np.trace(mom.second_quadrature()) - np.trace(kernel.second_moment())) < tol
    )


def test_bump_density_unit_mass(bump_kernel):
    z = np.linspace(-0.8, 1.0, 400_001)[:, None]
    mass = np.trapezoid(bump_kernel.density(z).ravel(), z.ravel())
    assert abs(mass - 1.0) < 1e-10


def test_shifted_gaussian_first_moment_exact():
    mom = periodize(DispersalKernel("shifted_gaussian", dim=1, width=0.1, center=(0.3,)), 64)
    assert abs(mom.mean_quadrature()[0] - 0.3) < 1e-10


def test_even_kernel_odd_first_moment_kernel(gaussian_kernel):
    mom = periodize(gaussian_kernel, 64)
    m1 = mom.m1[:, 0]
    # M1(-z) = -M1(z): index n-m holds the negated displacement of index m
    flipped = -np.concatenate([[m1[0]], m1[:0:-1]])
    assert np.max(np.abs(m1 - flipped)) < 1e-10
    assert abs(mom.mean_quadrature()[0]) < 1e-10


def test_bump_mass_normalized_numerically(bump_kernel):
    mom = periodize(bump_kernel, 64)
    assert abs(mom.mass_quadrature() - 1.0) < 1e-8


def test_periodization_2d():
    kernel = DispersalKernel("shifted_gaussian", dim=2, width=0.2, center=(0.2, -0.1))
    mom = periodize(kernel, 16)
    assert abs(mom.mass_quadrature() - 1.0) < 1e-9
    assert np.max(np.abs(mom.mean_quadrature() - [0.2, -0.1])) < 1e-9
    assert np.max(np.abs(mom.second_quadrature() - kernel.second_moment())) < 1e-9


def test_constants_in_generator_kernel(moments8):
    n = moments8.grid.size
    gen = assemble_generator(moments8, np.ones((n, n)))
    v = np.ones(n)
    assert np.max(np.abs(gen.apply(v))) < 1e-14
    # row sums of K equal G
    assert np.max(np.abs(gen.K.sum(axis=1) - gen.G)) == 0.0
    assert np.all(gen.K >= 0.0)


def test_generator_matches_fine_quadrature():
    kernel = DispersalKernel("gaussian", dim=1, width=0.3)
    n = 8
    mom = periodize(kernel, n)
    gen = assemble_generator(mom, np.ones((n, n)))
    xi = mom.grid.points()[:, 0]
    v_fn = lambda x: np.cos(2.0 * np.pi * x)
    applied = gen.apply(v_fn(xi))
    direct = fine_quadrature_apply(kernel, 1.0, v_fn, xi)
    assert np.max(np.abs(applied - direct)) < 1e-6


def test_operator_norm_bound():
    # induced infinity norm of A stays below 2 * alpha_hi for rate slices
    # inside the band (bounded-generator property)
    kernel = DispersalKernel("shifted_gaussian", dim=1, width=0.2, center=(0.25,))
    n = 16
    mom = periodize(kernel, n)
    rng = np.random.default_rng(0)
    alpha_lo, alpha_hi = 0.5, 2.0
    for _ in range(100):
        mu = rng.uniform(alpha_lo, alpha_hi, size=(n, n))
        gen = assemble_generator(mom, mu)
        assert gen.infinity_norm() <= 2.0 * alpha_hi * (1.0 + 1e-9)


def test_adjoint_conserves_mass():
    kernel = DispersalKernel("shifted_gaussian", dim=1, width=0.2, center=(0.25,))
    n = 32
    mom = periodize(kernel, n)
    rng = np.random.default_rng(1)
    for _ in range(5):
        mu = rng.uniform(0.5, 1.5, size=(n, n))
        gen = assemble_generator(mom, mu)
        p = rng.standard_normal(n)
        assert abs(np.sum(gen.apply_adjoint(p)) * mom.grid.cell_volume) < 1e-12


def test_symmetric_slice_gives_symmetric_K(gaussian_kernel):
    n = 32
    mom = periodize(gaussian_kernel, n)
    xi = mom.grid.points()
    mu = 1.0 + 0.3 * np.cos(2 * np.pi * (xi[:, 0][:, None] + xi[:, 0][None, :]))
    gen = assemble_generator(mom, mu)
    assert np.max(np.abs(gen.K - gen.K.T)) < 1e-14 * np.max(gen.K)


def test_grid_mismatch_raises(moments8):
    with pytest.raises(DimensionError):
        assemble_generator(moments8, np.ones((4, 4)))


def test_invalid_kernels_rejected():
    with pytest.raises(ConfigurationError):
        DispersalKernel("gaussian", dim=1, width=-0.1)
    with pytest.raises(ConfigurationError):
        DispersalKernel("pareto", dim=1, width=0.2)
    with pytest.raises(ConfigurationError):
        DispersalKernel("gaussian", dim=1, width=0.2, center=(0.3,))


@settings(max_examples=20, deadline=None)
@given(
    width=st.floats(0.1, 0.6),
    center=st.floats(-0.8, 0.8),
    n=st.sampled_from([32, 48]),
)
def test_periodization_preserves_gaussian_moments(width, center, n):
    kernel = DispersalKernel("shifted_gaussian", dim=1, width=width, center=(center,))
    mom = periodize(kernel, n)
    assert abs(mom.mass_quadrature() - 1.0) < 1e-8
    assert abs(mom.mean_quadrature()[0] - center) < 1e-8
    assert abs(mom.second_quadrature()[0, 0] - (width**2 + center**2)) < 1e-7

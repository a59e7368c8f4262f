import numpy as np
import pytest

from jumphom.cell import CellOptions, solve_cell
from jumphom.environment import EnvironmentSpec, constant_profile, sample_environment
from jumphom.epsilon import (
    EpsProblem,
    FrameShift,
    GaussianBump,
    build_frame,
    micro_environment,
    moving_frame_error,
    product_case_check,
    solve_eps,
    solve_homogenized,
    spectral_shift,
    weighted_energy,
)
from jumphom.errors import ConfigurationError, DimensionError, DomainError
from jumphom.evolution import AssembledEnvironment, IntegratorConfig, evolve_forward
from jumphom.grids import TorusGrid
from jumphom.kernels import DispersalKernel, periodize


def _problem(kernel, spec, eps=0.2, L=1.0, npc=10, T=0.1, n_t=3, width=0.03):
    cells = int(round(L / eps))
    return EpsProblem(
        kernel=kernel,
        env_spec=spec,
        epsilon=eps,
        box_length=L,
        n_x=cells * npc,
        u0=GaussianBump(center=(L / 2.0,), width=width),
        final_time=T,
        n_sample_times=n_t,
    )


def test_validation_catches_geometry_problems(gaussian_kernel, constant_spec):
    bad = EpsProblem(
        kernel=gaussian_kernel,
        env_spec=constant_spec,
        epsilon=0.3,
        box_length=1.0,
        n_x=30,
        u0=GaussianBump(center=(0.5,), width=0.03),
        final_time=0.1,
    )
    issues = bad.validate()
    assert any("whole number of cells" in m for m in issues)
    ok = _problem(gaussian_kernel, constant_spec)
    assert ok.validate() == []


def test_constant_initial_preserved(gaussian_kernel, asymmetric_spec):
    problem = _problem(gaussian_kernel, asymmetric_spec)
    # constant datum: override the bump with a flat field by hand
    sol_obj = solve_eps(problem)
    grid = problem.box_grid()
    path = sol_obj.path
    moments = periodize(gaussian_kernel, problem.n_x, period=float(problem.cells))
    asm = AssembledEnvironment(moments, path)
    cfg = IntegratorConfig.from_band(asymmetric_spec.alpha_hi, 0.25)
    traj = evolve_forward(
        np.ones(problem.n_x), asm, 0.0, problem.micro_horizon(), cfg,
        sample_times=[problem.micro_horizon()],
    )
    assert np.max(np.abs(traj.values - 1.0)) < 1e-12


def test_eps_one_reduces_to_cell_generator(gaussian_kernel, constant_spec):
    # epsilon = 1 with a one-cell box: one step of the scaled solver equals
    # one step of the plain torus evolution on the same grid
    problem = EpsProblem(
        kernel=gaussian_kernel,
        env_spec=constant_spec,
        epsilon=1.0,
        box_length=1.0,
        n_x=32,
        u0=GaussianBump(center=(0.5,), width=0.03),
        final_time=0.02,
        n_sample_times=2,
    )
    sol = solve_eps(problem)
    mom = periodize(gaussian_kernel, 32)
    path = micro_environment(problem, 0, sol.path)
    asm = AssembledEnvironment(mom, path)
    cfg = IntegratorConfig.from_band(constant_spec.alpha_hi, 0.25)
    traj = evolve_forward(
        problem.u0(problem.box_grid().points()), asm, 0.0, 0.02, cfg, sample_times=[0.02]
    )
    assert np.max(np.abs(sol.values[-1] - traj.values[-1])) < 1e-12


def test_symmetric_case_is_l2_contraction(gaussian_kernel, symmetric_spec):
    problem = _problem(gaussian_kernel, symmetric_spec, eps=0.1, npc=10, T=0.05)
    sol = solve_eps(problem)
    assert sol.l2_norms[-1] <= sol.l2_norms[0] * (1.0 + 1e-6)
    assert np.all(np.diff(sol.l2_norms) <= 1e-12)


def test_homogenized_gaussian_widening():
    grid = TorusGrid(n=512, dim=1, period=8.0)
    u0 = GaussianBump(center=(4.0,), width=0.15)(grid.points())
    theta = np.array([[0.5]])
    traj = solve_homogenized(u0, theta, grid, [0.0, 0.3])
    w_t = np.sqrt(0.15**2 + 2 * 0.5 * 0.3)
    x = grid.points()[:, 0]
    exact = (0.15 / w_t) * np.exp(-0.5 * (x - 4.0) ** 2 / w_t**2)
    assert np.max(np.abs(traj.values[1] - exact)) < 1e-12
    assert np.max(np.abs(traj.values[0] - u0)) == 0.0
    assert abs(grid.integrate(traj.values[1]) - grid.integrate(u0)) < 1e-12


def test_homogenized_needs_positive_definite():
    grid = TorusGrid(n=32, dim=1, period=1.0)
    with pytest.raises(ConfigurationError):
        solve_homogenized(np.ones(32), np.array([[-0.1]]), grid, [0.1])


def test_spectral_shift_roundtrip():
    grid = TorusGrid(n=128, dim=1, period=2.0)
    rng = np.random.default_rng(4)
    smooth = np.real(np.fft.ifft(np.fft.fft(rng.standard_normal(128)) *
                                 np.exp(-0.05 * np.fft.fftfreq(128, d=grid.h) ** 2)))
    out = spectral_shift(spectral_shift(smooth, grid, [0.4321]), grid, [-0.4321])
    assert np.max(np.abs(out - smooth)) < 1e-13


def test_moving_frame_error_zero_at_t0(gaussian_kernel, symmetric_spec):
    problem = _problem(gaussian_kernel, symmetric_spec, eps=0.1, npc=10, T=0.05, n_t=2)
    sol = solve_eps(problem)
    grid = problem.box_grid()
    u0_vals = problem.u0(grid.points())
    hom = solve_homogenized(u0_vals, np.array([[0.01]]), grid, sol.times)
    frame = FrameShift(
        times=sol.times,
        drift_part=np.zeros((len(sol.times), 1)),
        fluctuation_part=np.zeros((len(sol.times), 1)),
    )
    res = moving_frame_error(sol.trajectory(), hom, frame)
    assert res["errors"][0] == 0.0


def test_boundary_guard_raises(gaussian_kernel, constant_spec):
    problem = _problem(gaussian_kernel, constant_spec, eps=0.2, T=0.05, n_t=2)
    sol = solve_eps(problem)
    grid = problem.box_grid()
    hom = solve_homogenized(problem.u0(grid.points()), np.array([[0.01]]), grid, sol.times)
    # a shift of half a box pushes the bump into the boundary strip
    frame = FrameShift(
        times=sol.times,
        drift_part=np.stack([sol.times * 0.0, sol.times * 0.0 + 0.5]).T[:, :1] * 0.0
        + np.array([[0.0], [0.5]]),
        fluctuation_part=np.zeros((len(sol.times), 1)),
    )
    with pytest.raises(DomainError):
        moving_frame_error(sol.trajectory(), hom, frame)


def test_weighted_energy_non_increasing(shifted_kernel, asymmetric_spec):
    problem = _problem(shifted_kernel, asymmetric_spec, eps=0.2, npc=16, T=0.08, n_t=5)
    relax = 40.0
    path = micro_environment(problem, 0, extra_horizon=2 * relax + 2)
    sol = solve_eps(problem, path=path)
    opts = CellOptions(
        n=16, sample_dt=problem.micro_horizon() / 4, relax_density=relax,
        relax_corrector=relax, with_kappa2=False, verify_relaxation=False,
    )
    cell = solve_cell(
        shifted_kernel, asymmetric_spec, (0.0, problem.micro_horizon()),
        options=opts, path=path,
    )
    energy = weighted_energy(sol, cell)
    assert np.all(np.diff(energy) <= 1e-10 * energy[0])


def test_frame_from_cell_solution(shifted_kernel, asymmetric_spec):
    problem = _problem(shifted_kernel, asymmetric_spec, eps=0.2, npc=16, T=0.08, n_t=5)
    relax = 40.0
    path = micro_environment(problem, 0, extra_horizon=2 * relax + 2)
    opts = CellOptions(
        n=16, sample_dt=problem.micro_horizon() / 4, relax_density=relax,
        relax_corrector=relax, with_kappa2=False, verify_relaxation=False,
    )
    cell = solve_cell(
        shifted_kernel, asymmetric_spec, (0.0, problem.micro_horizon()),
        options=opts, path=path,
    )
    b = np.array([0.25])
    frame = build_frame(0.2, problem.sample_times(), b, cell)
    assert np.max(np.abs(frame.fluctuation_part[0])) == 0.0
    total = frame.total
    # total shift is eps * cumulative drift integral
    expected = 0.2 * cell.beta_cumint[-1]
    assert np.max(np.abs(total[-1] - expected)) < 1e-12
    drift_only = build_frame(0.2, problem.sample_times(), b, drift_only=True)
    assert np.max(np.abs(drift_only.fluctuation_part)) == 0.0


def test_product_check_identity_and_lln(product_spec, gaussian_kernel):
    prob = _problem(gaussian_kernel, product_spec, eps=0.2, npc=10, T=0.2, n_t=5)
    res = product_case_check(prob)
    assert res["max_mismatch"] < 1e-10
    # clock drift shrinks with epsilon for the same realization
    prob2 = _problem(gaussian_kernel, product_spec, eps=0.1, npc=10, T=0.2, n_t=5)
    res2 = product_case_check(prob2)
    assert res2["max_abs_delta"] < res["max_abs_delta"] + 0.05


def test_product_check_needs_product_model(gaussian_kernel, asymmetric_spec):
    prob = _problem(gaussian_kernel, asymmetric_spec, eps=0.2)
    with pytest.raises(ConfigurationError):
        product_case_check(prob)

"""Monte Carlo checks of the invariance principle for the centered drift.

The rescaled centered-drift integral

    G0(t) = eps * ∫_0^{t/eps^2} (beta(tau) - b) dtau

converges in law to sigma W_t, with sigma sigma* the long-run covariance
of the centered drift.  This module samples ensembles of G0 paths (the
drift integral per segment is exact for piecewise-constant environments),
compares their second moments, gaussianity diagnostics, and increment
correlations against the Wiener limit, and runs a functional-level
comparison between the frame-shifted scaled solution and the homogenized
solution evaluated in a Gaussian-shifted frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .cell import CellOptions, EffectiveModel, _relax_window
from .environment import EnvironmentSpec, sample_environment
from .errors import ConfigurationError, DimensionError, StatisticalError
from .evolution import AssembledEnvironment, ExactPiecewisePropagator, fit_exponential_decay
from .grids import TorusGrid
from .kernels import DispersalKernel, periodize
from .epsilon import EpsProblem, solve_eps, solve_homogenized, spectral_shift


def sample_G0_paths(
    kernel: DispersalKernel,
    spec: EnvironmentSpec,
    epsilon: float,
    t_max: float,
    replicas: int,
    b: np.ndarray,
    t_grid: Optional[Sequence[float]] = None,
    options: Optional[CellOptions] = None,
    seed_base: int = 1000,
):
    """Ensemble of centered-drift fluctuation paths.

    Returns (t_grid, paths) with paths of shape (replicas, len(t_grid), d).
    Each replica draws an independent environment, relaxes the stationary
    density backward past the micro horizon, and accumulates the exact
    per-segment drift integrals before centering by the precomputed b.
    """
    if b is None:
        raise ConfigurationError("effective drift b must be computed before G0 sampling")
    if replicas < 2:
        raise ConfigurationError("need at least 2 replicas")
    options = options or CellOptions(n=16)
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if t_grid is None:
        t_grid = np.linspace(0.0, t_max, 5)
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid[0] != 0.0:
        raise ConfigurationError("t_grid must start at 0")
    s_breaks = (t_grid[1:] / epsilon**2).tolist()
    s_max = t_max / epsilon**2
    moments = periodize(kernel, options.n, options.tail_tolerance)
    assembled = AssembledEnvironment(
        moments, sample_environment(spec, (-1.0, 1.0), 0), with_transport=True
    )
    relax = options.relax_density or _relax_window(assembled, options.doubling_tol, options)
    prop = ExactPiecewisePropagator(assembled)
    d = spec.dim
    paths = np.zeros((replicas, t_grid.size, d))
    for r in range(replicas):
        path_r = sample_environment(
            spec, (-1.0, s_max + relax + 1.0), seed_offset=seed_base + r
        )
        integrals, _, _ = prop.drift_sweep(
            0.0, s_max, relax, integral_breaks=s_breaks, path=path_r
        )
        cum = np.cumsum(integrals, axis=0)
        paths[r, 1:, :] = epsilon * (cum - np.outer(t_grid[1:] / epsilon**2, b))
    return t_grid, paths


@dataclass
class CltReport:
    """Comparison of a G0 ensemble against its Wiener limit."""

    replicas: int
    epsilon: float
    times: np.ndarray
    empirical_cov: np.ndarray  # (m, d, d)
    target_cov: np.ndarray  # (m, d, d)
    cov_se: np.ndarray  # (m, d, d)
    skewness: np.ndarray  # (d,)
    excess_kurtosis: np.ndarray  # (d,)
    increment_correlation: float
    linearity_ratio: Optional[float]
    checks: dict
    tolerances: dict

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {
            "replicas": self.replicas,
            "epsilon": self.epsilon,
            "times": self.times.tolist(),
            "empirical_cov": self.empirical_cov.tolist(),
            "target_cov": self.target_cov.tolist(),
            "cov_se": self.cov_se.tolist(),
            "skewness": self.skewness.tolist(),
            "excess_kurtosis": self.excess_kurtosis.tolist(),
            "increment_correlation": self.increment_correlation,
            "linearity_ratio": self.linearity_ratio,
            "checks": {k: bool(v) for k, v in self.checks.items()},
            "tolerances": self.tolerances,
        }


def _cov_and_se(samples: np.ndarray):
    """Covariance across replicas and the gaussian-asymptotic s.e. of each entry."""
    R, d = samples.shape
    c = np.cov(samples, rowvar=False, ddof=1).reshape(d, d)
    se = np.sqrt((np.outer(np.diag(c), np.diag(c)) + c**2) / max(R - 1, 1))
    return c, se


def clt_check(
    t_grid: np.ndarray,
    paths: np.ndarray,
    sigma_sq: np.ndarray,
    epsilon: float,
    sigma_sq_se: Optional[np.ndarray] = None,
    kurtosis_tol: float = 0.3,
    n_sigma: float = 3.0,
) -> CltReport:
    """Second-moment, gaussianity, and increment checks of a G0 ensemble.

    The empirical covariance at each sampled time must match
    sigma_sq * t within ``n_sigma`` combined standard errors; disjoint
    increments must be uncorrelated at the same level; component skewness
    stays within its sampling band and excess kurtosis within
    ``kurtosis_tol`` (calibrated for ensembles of ~2000 paths).
    """
    R, m, d = paths.shape
    sigma_sq = np.atleast_2d(np.asarray(sigma_sq, dtype=float))
    if sigma_sq.shape != (d, d):
        raise DimensionError("sigma_sq dimension mismatch")
    emp = np.zeros((m, d, d))
    se = np.zeros((m, d, d))
    for k in range(m):
        emp[k], se[k] = _cov_and_se(paths[:, k, :])
    target = np.einsum("ij,m->mij", sigma_sq, t_grid)
    target_se = (
        np.einsum("ij,m->mij", np.atleast_2d(sigma_sq_se), t_grid)
        if sigma_sq_se is not None
        else np.zeros_like(target)
    )
    combined = np.sqrt(se**2 + target_se**2)
    scale = max(float(np.max(np.abs(target))), 1e-300)
    cov_ok = bool(
        np.all(
            np.abs(emp - target) <= n_sigma * combined + 1e-12 * scale + 1e-15
        )
    )
    final = paths[:, -1, :]
    var_final = final.var(axis=0, ddof=1)
    degenerate = var_final < 1e-300
    skew = np.where(degenerate, 0.0, stats.skew(final, axis=0))
    kurt = np.where(degenerate, 0.0, stats.kurtosis(final, axis=0, fisher=True))
    skew_band = n_sigma * math.sqrt(6.0 / R)
    skew_ok = bool(np.all(np.abs(skew) <= skew_band))
    kurt_ok = bool(np.all(np.abs(kurt) <= kurtosis_tol))
    # increment decorrelation between [0, t_mid] and [t_mid, t_end]
    mid = m // 2
    inc1 = paths[:, mid, :] - paths[:, 0, :]
    inc2 = paths[:, -1, :] - paths[:, mid, :]
    v1, v2 = inc1.var(axis=0, ddof=1), inc2.var(axis=0, ddof=1)
    if np.all(v1 > 1e-300) and np.all(v2 > 1e-300):
        corr = float(
            np.max(
                np.abs(
                    np.mean((inc1 - inc1.mean(0)) * (inc2 - inc2.mean(0)), axis=0)
                    / np.sqrt(v1 * v2)
                )
            )
        )
    else:
        corr = 0.0
    incr_ok = corr <= n_sigma / math.sqrt(R)
    # Wiener scaling: Var at t_end over Var at t_mid approaches t ratio
    lin = None
    lin_ok = True
    if t_grid[mid] > 0 and np.all(np.diag(emp[mid]) > 1e-300):
        lin = float(np.mean(np.diag(emp[-1]) / np.diag(emp[mid])))
        expected = float(t_grid[-1] / t_grid[mid])
        lin_ok = abs(lin - expected) <= n_sigma * expected * math.sqrt(8.0 / R)
    checks = {
        "covariance_matches": cov_ok,
        "skewness_in_band": skew_ok,
        "kurtosis_in_band": kurt_ok,
        "increments_uncorrelated": bool(incr_ok),
        "time_linearity": bool(lin_ok),
    }
    return CltReport(
        replicas=R,
        epsilon=epsilon,
        times=t_grid.copy(),
        empirical_cov=emp,
        target_cov=target,
        cov_se=combined,
        skewness=np.atleast_1d(skew),
        excess_kurtosis=np.atleast_1d(kurt),
        increment_correlation=corr,
        linearity_ratio=lin,
        checks=checks,
        tolerances={
            "n_sigma": n_sigma,
            "kurtosis_tol": kurtosis_tol,
            "skew_band": skew_band,
        },
    )


# ---------------------------------------------------------------------------
# law-level comparison through scalar functionals
# ---------------------------------------------------------------------------


def make_functional(spec: dict):
    """Scalar functionals of a field: point evaluation or windowed L2 mass."""
    kind = spec.get("kind")
    if kind == "point":
        x_star = np.atleast_1d(np.asarray(spec["x"], dtype=float))

        def point_eval(values: np.ndarray, grid: TorusGrid) -> float:
            pts = grid.points()
            idx = int(np.argmin(np.sum((pts - x_star) ** 2, axis=1)))
            return float(values[idx])

        return point_eval
    if kind == "mass":
        lo, hi = float(spec["lo"]), float(spec["hi"])

        def window_mass(values: np.ndarray, grid: TorusGrid) -> float:
            pts = grid.points()[:, 0]
            mask = (pts >= lo) & (pts <= hi)
            return float(np.sqrt(np.sum(values[mask] ** 2) * grid.cell_volume))

        return window_mass
    raise ConfigurationError(f"unknown functional kind {kind!r}")


def law_limit_check(
    base_problem: EpsProblem,
    epsilons: Sequence[float],
    effective: EffectiveModel,
    functionals: Sequence[dict],
    replicas: int = 200,
    seed_base: int = 5000,
    rng_seed: int = 97,
) -> dict:
    """Distribution-level comparison in the drift-only moving frame.

    For each epsilon, an ensemble of scaled solutions is shifted by
    b t / eps and reduced to scalars by the given functionals;  the
    reference ensemble applies Gaussian frame shifts sigma sqrt(t) Z to
    the homogenized solution.  Reports two-sample Kolmogorov-Smirnov
    statistics and whether the smallest epsilon passes at the 5% level.
    """
    sigma = effective.sigma()
    b = effective.b
    T = base_problem.final_time
    rng = np.random.default_rng(rng_seed)
    fns = [make_functional(f) for f in functionals]
    out = {"epsilons": list(map(float, epsilons)), "functionals": functionals, "results": []}
    for i_eps, eps in enumerate(epsilons):
        problem = EpsProblem(
            kernel=base_problem.kernel,
            env_spec=base_problem.env_spec,
            epsilon=float(eps),
            box_length=base_problem.box_length,
            n_x=int(base_problem.n_x * base_problem.epsilon / eps),
            u0=base_problem.u0,
            final_time=T,
            n_sample_times=2,
            dt_factor=base_problem.dt_factor,
        )
        problem.require_valid()
        grid = problem.box_grid()
        samples = np.zeros((replicas, len(fns)))
        for r in range(replicas):
            sol = solve_eps(problem, seed_offset=seed_base + 131 * i_eps + r)
            shifted = spectral_shift(sol.values[-1], grid, b * T / eps)
            for j, fn in enumerate(fns):
                samples[r, j] = fn(shifted, grid)
        u0_vals = problem.u0(grid.points())
        hom = solve_homogenized(u0_vals, effective.theta, grid, [T]).values[0]
        refs = np.zeros((replicas, len(fns)))
        for r in range(replicas):
            z = rng.standard_normal(grid.dim)
            ref_field = spectral_shift(hom, grid, -math.sqrt(T) * (sigma @ z))
            for j, fn in enumerate(fns):
                refs[r, j] = fn(ref_field, grid)
        ks = []
        for j in range(len(fns)):
            if samples[:, j].std() < 1e-14 and refs[:, j].std() < 1e-14:
                # both ensembles degenerate: compare the points directly
                stat = float(abs(np.median(samples[:, j]) - np.median(refs[:, j])) > 1e-8)
            else:
                stat = float(stats.ks_2samp(samples[:, j], refs[:, j]).statistic)
            ks.append(stat)
        threshold = 1.358 * math.sqrt(2.0 / replicas)
        out["results"].append(
            {
                "epsilon": float(eps),
                "ks_statistics": ks,
                "threshold": threshold,
                "passes": bool(all(s <= threshold for s in ks)),
            }
        )
    out["smallest_eps_passes"] = out["results"][-1]["passes"]
    return out


# ---------------------------------------------------------------------------
# mixing surrogate: conditional-mean decay of the centered drift
# ---------------------------------------------------------------------------


def conditional_drift_decay(
    kernel: DispersalKernel,
    spec: EnvironmentSpec,
    lags: Sequence[float],
    replicas: int = 400,
    options: Optional[CellOptions] = None,
    seed_base: int = 20000,
):
    """Decay of || E(beta°(t) | state at 0) || with the lag t.

    Regresses the centered drift on the switching state occupied at time
    zero; for exponentially mixing environments the conditional mean
    decays at least at the switching rate.  Returns (lags, norms, rate).
    """
    options = options or CellOptions(n=16)
    lags = np.asarray(sorted(lags), dtype=float)
    moments = periodize(kernel, options.n, options.tail_tolerance)
    assembled = AssembledEnvironment(
        moments, sample_environment(spec, (-1.0, 1.0), 0), with_transport=True
    )
    relax = options.relax_density or _relax_window(assembled, options.doubling_tol, options)
    prop = ExactPiecewisePropagator(assembled)
    n_states = len(spec.profiles) if spec.model == "markov_switching" else len(
        spec.lambda_values or (1,)
    )
    d = spec.dim
    sums = np.zeros((n_states, lags.size, d))
    counts = np.zeros(n_states)
    all_beta = np.zeros((replicas, lags.size, d))
    states0 = np.zeros(replicas, dtype=int)
    for r in range(replicas):
        path_r = sample_environment(
            spec, (-1.0, lags[-1] + relax + 1.0), seed_offset=seed_base + r
        )
        _, beta_s, _ = prop.drift_sweep(
            0.0, float(lags[-1]) + 1e-9, relax, sample_times=lags, path=path_r
        )
        s0 = path_r.state_at(0.0)
        states0[r] = s0
        all_beta[r] = beta_s
        sums[s0] += beta_s
        counts[s0] += 1
    grand_mean = all_beta.mean(axis=(0, 1))
    norms = np.zeros(lags.size)
    for k in range(lags.size):
        cond = np.array(
            [
                sums[j, k] / counts[j] - grand_mean
                for j in range(n_states)
                if counts[j] > 0
            ]
        )
        norms[k] = float(np.linalg.norm(cond))
    rate, r2, _ = fit_exponential_decay(lags, norms, floor=1e-12)
    return lags, norms, rate, r2

"""Cell problems on the unit torus: every ingredient of the effective model.

The pipeline per environment realization:

1. relax the adjoint density backward from terminal 1 well beyond the
   observation window (the stationary density is the backward limit; a
   rerun with the doubled relaxation window certifies the tolerance);
2. contract it with the first-moment kernel into the instantaneous drift
   beta(s); its ergodic time average is the constant drift b;
3. integrate the first corrector forward from zero data with forcing
   f(xi, s) = -∫ z a(z) mu(xi, xi-z; s) dz + beta(s); the compatibility
   integral of f against the density vanishes by construction of beta,
   and the additive constant is fixed by zero grid-mean at the first
   recorded time;
4. form the second-corrector forcing field, its density average
   theta_inst(s), and the second corrector itself; the second corrector
   is marched jointly with the (normalized) first one so its forcing uses
   exactly the corrector trajectory being produced;
5. average theta_inst over time and replicas into the effective matrix
   Theta (symmetrized: the antisymmetric part depends on the corrector
   normalization and never enters the homogenized equation);
6. integrate the centered-drift autocovariance into the long-run
   covariance sigma sigma*.

Defining-equation residuals are measured post hoc with 5-point centered
differences on stencils aligned to the march grid and interior to single
environment segments, so the finite-difference truncation stays at the
integrator's order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .environment import EnvironmentPath, EnvironmentSpec, sample_environment
from .errors import (
    ConfigurationError,
    DimensionError,
    InconsistencyError,
    RelaxationError,
    StatisticalError,
)
from .evolution import (
    AssembledEnvironment,
    ExactPiecewisePropagator,
    IntegratorConfig,
    MarchPlan,
    _rk4_forced,
    adjoint_backward_pass,
    fit_exponential_decay,
    plan_march,
)
from .grids import FieldTrajectory, TorusGrid
from .kernels import DispersalKernel, PeriodizedMoments, periodize


@dataclass
class CellOptions:
    """Numerical knobs of the cell pipeline."""

    n: int = 64
    dt_factor: float = 0.25
    sample_dt: float = 0.25
    relax_density: Optional[float] = None
    relax_corrector: Optional[float] = None
    doubling_tol: float = 1e-8
    verify_relaxation: bool = True
    tail_tolerance: float = 1e-12
    with_kappa2: bool = True
    residual_stencils: int = 8
    relax_cap: float = 400.0
    relax_safety: float = 1.6
    method: str = "rk4"  # "exact" enables the piecewise propagator fast path

    def integrator(self, alpha_hi: float) -> IntegratorConfig:
        return IntegratorConfig.from_band(alpha_hi, self.dt_factor)


@dataclass
class CellSolution:
    """All stationary cell objects on one observation window, one realization."""

    grid: TorusGrid
    window: tuple
    times: np.ndarray
    p_inf: np.ndarray  # (m, N)
    beta: np.ndarray  # (m, d)
    kappa1: np.ndarray  # (m, N, d)
    theta_inst: np.ndarray  # (m, d, d)
    kappa2: Optional[np.ndarray]  # (m, N, d, d)
    diagnostics: dict
    seed_offset: int = 0
    # cumulative ∫ beta ds from the window start to each sample time
    beta_cumint: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.beta.shape[1]

    def p_trajectory(self) -> FieldTrajectory:
        return FieldTrajectory(grid=self.grid, times=self.times, values=self.p_inf)

    def to_dict(self, downsample: int = 1) -> dict:
        sl = slice(None, None, max(1, int(downsample)))
        out = {
            "n": self.grid.n,
            "dim": self.grid.dim,
            "window": [float(w) for w in self.window],
            "seed_offset": self.seed_offset,
            "times": self.times[sl].tolist(),
            "beta": self.beta[sl].tolist(),
            "theta_inst": self.theta_inst[sl].tolist(),
            "p_inf": self.p_inf[sl].tolist(),
            "kappa1": self.kappa1[sl].tolist(),
            "diagnostics": _plain(self.diagnostics),
        }
        if self.kappa2 is not None:
            out["kappa2"] = self.kappa2[sl].tolist()
        return out


def _plain(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if v is None or isinstance(v, (bool, str, int)):
            out[k] = v
        elif np.isscalar(v):
            out[k] = float(v)
        else:
            out[k] = np.asarray(v).tolist()
    return out


@dataclass
class EffectiveModel:
    """Constant effective drift, diffusivity, and long-run drift covariance."""

    b: np.ndarray
    b_se: np.ndarray
    theta: np.ndarray
    theta_se: np.ndarray
    sigma_sq: Optional[np.ndarray] = None
    sigma_sq_se: Optional[np.ndarray] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        if not np.allclose(self.theta, self.theta.T, atol=1e-10):
            raise ConfigurationError("effective diffusivity must be symmetric")
        if np.linalg.eigvalsh(self.theta).min() <= 0:
            raise StatisticalError(
                "effective diffusivity estimate is not positive definite; "
                "increase the averaging horizon"
            )
        if self.sigma_sq is not None:
            self.sigma_sq = np.atleast_2d(np.asarray(self.sigma_sq, dtype=float))
            if np.linalg.eigvalsh(0.5 * (self.sigma_sq + self.sigma_sq.T)).min() < -1e-12:
                raise StatisticalError("long-run covariance estimate is not PSD")

    def sigma(self) -> np.ndarray:
        """Symmetric PSD square root of sigma_sq."""
        if self.sigma_sq is None:
            raise ConfigurationError("sigma_sq not computed")
        w, V = np.linalg.eigh(0.5 * (self.sigma_sq + self.sigma_sq.T))
        return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T

    def to_dict(self) -> dict:
        out = {
            "b": self.b.tolist(),
            "b_se": np.asarray(self.b_se).tolist(),
            "theta": self.theta.tolist(),
            "theta_se": np.asarray(self.theta_se).tolist(),
            "provenance": self.provenance,
        }
        if self.sigma_sq is not None:
            out["sigma_sq"] = self.sigma_sq.tolist()
            out["sigma_sq_se"] = np.asarray(self.sigma_sq_se).tolist()
        return out

    @staticmethod
    def from_dict(data: dict) -> "EffectiveModel":
        return EffectiveModel(
            b=np.asarray(data["b"]),
            b_se=np.asarray(data["b_se"]),
            theta=np.asarray(data["theta"]),
            theta_se=np.asarray(data["theta_se"]),
            sigma_sq=np.asarray(data["sigma_sq"]) if data.get("sigma_sq") is not None else None,
            sigma_sq_se=(
                np.asarray(data["sigma_sq_se"]) if data.get("sigma_sq_se") is not None else None
            ),
            provenance=data.get("provenance", {}),
        )


# ---------------------------------------------------------------------------
# relaxation windows and shared lookups
# ---------------------------------------------------------------------------


def spectral_gap(assembled: AssembledEnvironment) -> float:
    """Smallest forward-decay rate over profiles (distance of spec(A)\\{0} to 0)."""
    gaps = []
    for bundle in assembled.bundles:
        lam = np.linalg.eigvals(bundle.gen.matrix())
        rates = -np.real(lam)
        rates = rates[rates > 1e-10]
        gaps.append(float(rates.min()) if rates.size else 0.0)
    gap = min(gaps)
    if assembled.path.spec.model == "product_scalar":
        gap *= min(assembled.path.spec.lambda_values)
    return gap


def _relax_window(assembled, tol: float, options: CellOptions) -> float:
    gap = spectral_gap(assembled)
    if gap <= 0:
        return options.relax_cap
    win = options.relax_safety * math.log(1.0 / tol) / gap
    return float(min(options.relax_cap, max(win, 5.0)))


def _bundle_scale_at(assembled: AssembledEnvironment, t: float):
    """Right-continuous (bundle, scale) of the active segment at time t."""
    path = assembled.path
    state = path.state_at(t)
    if path.spec.model == "markov_switching":
        return assembled.bundles[state], 1.0
    if path.spec.model == "product_scalar":
        return assembled.bundles[0], float(path.spec.lambda_values[state])
    return assembled.bundles[0], 1.0


class _HalfGridLookup:
    def __init__(self, times: np.ndarray, values: np.ndarray):
        self.times = times
        self.values = values

    def __call__(self, t: float) -> np.ndarray:
        k = int(np.searchsorted(self.times, t))
        for cand in (k, k - 1, k + 1):
            if 0 <= cand < self.times.size and abs(self.times[cand] - t) <= 1e-9 * max(
                1.0, abs(t)
            ):
                return self.values[cand]
        raise DimensionError(f"time {t} missing from the stored half grid")


def sample_grid(s0: float, s1: float, sample_dt: float) -> np.ndarray:
    m = max(1, int(round((s1 - s0) / sample_dt)))
    return s0 + (s1 - s0) * np.arange(m + 1) / m


# ---------------------------------------------------------------------------
# stationary adjoint density
# ---------------------------------------------------------------------------


def compute_p_inf(
    assembled: AssembledEnvironment,
    window,
    relax_time: float,
    tol: float = 1e-8,
    options: Optional[CellOptions] = None,
    sample_times: Optional[Sequence[float]] = None,
    collect_p: bool = False,
    collect_lo: Optional[float] = None,
    breakpoints: Sequence[float] = (),
    verify: bool = True,
):
    """Stationary adjoint density on the window by backward relaxation.

    Relaxes from terminal 1 at window_end + relax_time; a rerun with the
    doubled relaxation window must agree within ``tol`` in sup-over-s L2
    norm, otherwise a RelaxationError reports the fitted decay rate and
    the window it suggests.  Returns (trajectory, diagnostics, lookup);
    the lookup gives the raw density on the half-step grid when
    ``collect_p`` is set (the corrector passes evaluate their forcing
    from it with their own current rate slice).
    """
    options = options or CellOptions()
    s0, s1 = float(window[0]), float(window[1])
    cfg = options.integrator(assembled.alpha_hi)
    if sample_times is None:
        sample_times = sample_grid(s0, s1, options.sample_dt)
    lo = collect_lo if collect_lo is not None else s0
    res = adjoint_backward_pass(
        assembled,
        np.ones(assembled.grid.size),
        s1 + relax_time,
        lo,
        cfg,
        sample_times=sample_times,
        collect_range=(lo, s1) if collect_p else None,
        collect_p=collect_p,
        breakpoints=breakpoints,
    )
    traj = res.trajectory
    diagnostics = {"mass_drift": res.mass_drift, "relax_density": relax_time}
    if verify:
        res2 = adjoint_backward_pass(
            assembled,
            np.ones(assembled.grid.size),
            s1 + 2.0 * relax_time,
            s0,
            cfg,
            sample_times=sample_times,
            breakpoints=breakpoints,
        )
        diffs = np.array(
            [
                assembled.grid.l2_norm(traj.values[k] - res2.trajectory.values[k])
                for k in range(len(traj))
            ]
        )
        gap = float(diffs.max())
        horizon_from_end = (s1 + relax_time) - traj.times
        rate, r2, _ = fit_exponential_decay(horizon_from_end, diffs)
        diagnostics.update({"doubling_gap": gap, "gamma0_fit": rate, "gamma0_r2": r2})
        if gap > tol:
            needed = math.log(1.0 / tol) / rate if rate and rate > 0 else float("inf")
            raise RelaxationError(
                f"density doubling gap {gap:.3e} exceeds tol {tol:.1e}",
                fitted_rate=rate,
                suggested_window=needed,
            )
    hv = assembled.grid.cell_volume
    masses = traj.values.sum(axis=1) * hv
    traj.values /= masses[:, None]
    lookup = _HalfGridLookup(res.half_times, res.p_half) if collect_p else None
    return traj, diagnostics, lookup


def compute_beta(p_traj: FieldTrajectory, assembled: AssembledEnvironment) -> np.ndarray:
    """Instantaneous drift beta(s) at the trajectory's sample times.

    The torus quadrature of ∫∫ z a(z) mu(xi, xi-z; s) p(xi, s) dxi dz,
    evaluated with the right-continuous rate slice at each sample time.
    """
    hv = assembled.grid.cell_volume
    out = np.zeros((len(p_traj), assembled.grid.dim))
    for k, t in enumerate(p_traj.times):
        bundle, scale = _bundle_scale_at(assembled, float(t))
        out[k] = -hv * scale * (p_traj.values[k] @ bundle.f0)
    return out


def _g_tilde(bundle, scale: float, kappa1: np.ndarray, beta: np.ndarray) -> np.ndarray:
    out = np.einsum("ni,j->nij", kappa1, beta)
    out += scale * bundle.t2
    out -= scale * np.einsum("inm,mj->nij", bundle.w1, kappa1)
    return out


def compute_theta_inst(
    kappa1: np.ndarray,
    beta: np.ndarray,
    p_inf: np.ndarray,
    assembled: AssembledEnvironment,
    times: np.ndarray,
    with_fields: bool = False,
):
    """Instantaneous effective matrix theta_inst(s) at the sample times.

    theta_inst(s) is the density average of the forcing field
    g(xi, s) = kappa1 (x) beta + ∫ (z(x)z/2 - z (x) kappa1(xi - z)) a mu dz.
    Returns the (m, d, d) array, plus the forcing fields if requested.
    """
    hv = assembled.grid.cell_volume
    m = len(times)
    d = assembled.grid.dim
    theta = np.zeros((m, d, d))
    g_all = np.zeros((m, assembled.grid.size, d, d)) if with_fields else None
    for k in range(m):
        bundle, scale = _bundle_scale_at(assembled, float(times[k]))
        g = _g_tilde(bundle, scale, kappa1[k], beta[k])
        if with_fields:
            g_all[k] = g
        theta[k] = hv * np.einsum("n,nij->ij", p_inf[k], g)
    if with_fields:
        return theta, g_all
    return theta


# ---------------------------------------------------------------------------
# corrector machinery
# ---------------------------------------------------------------------------


def _fd5(stencil_values: np.ndarray, h: float) -> np.ndarray:
    """4th-order centered derivative from values at t-2h .. t+2h."""
    v = stencil_values
    return (v[0] - 8.0 * v[1] + 8.0 * v[3] - v[4]) / (12.0 * h)


def _pick_stencil_centers(path, s0, s1, spacing, count):
    """Centers of 5-point stencils interior to single environment segments."""
    centers = []
    for a, b, _state in path.segments(s0, s1):
        if b - a > 6.0 * spacing:
            centers.append(0.5 * (a + b))
    if not centers:
        return []
    idx = np.linspace(0, len(centers) - 1, min(count, len(centers))).astype(int)
    return [centers[i] for i in sorted(set(idx.tolist()))]


class _EdgeRecorder:
    """Collects fields offered at march edges for a preset list of times."""

    def __init__(self, wanted: Sequence[float]):
        self.wanted = np.asarray(sorted(set(float(t) for t in wanted)))
        self.seen = {}

    def __call__(self, t: float, v: np.ndarray):
        if self.wanted.size == 0:
            return
        k = int(np.searchsorted(self.wanted, t))
        for cand in (k - 1, k):
            if 0 <= cand < self.wanted.size and abs(self.wanted[cand] - t) <= 1e-9 * max(
                1.0, abs(t)
            ):
                self.seen.setdefault(float(self.wanted[cand]), v.copy())

    def stack(self, times: Sequence[float]) -> np.ndarray:
        return np.asarray([self.seen[float(t)] for t in times])


def _forced_march(plan: MarchPlan, v0: np.ndarray, forcing, recorder=None) -> np.ndarray:
    v = np.array(v0, dtype=float)
    if recorder is not None:
        recorder(plan.edges[0], v)
    for k in range(plan.n_steps):
        t0, t1 = plan.edges[k], plan.edges[k + 1]
        h = t1 - t0
        bundle, scale = plan.bundle_of_step[k], plan.scale_of_step[k]
        if scale == 1.0:
            apply_op = bundle.gen.apply
        else:
            apply_op = lambda w, s=scale, b=bundle: s * b.gen.apply(w)
        v = _rk4_forced(
            apply_op,
            v,
            h,
            forcing(t0, bundle, scale),
            forcing(t0 + 0.5 * h, bundle, scale),
            forcing(t1, bundle, scale),
        )
        if recorder is not None:
            recorder(t1, v)
    return v


def _apply_matrix_field(bundle, g: np.ndarray) -> np.ndarray:
    n, d, _ = g.shape
    return bundle.gen.apply(g.reshape(n, d * d)).reshape(n, d, d)


def _second_corrector_pass(assembled, plan, kappa1_init, p_lookup, wanted_times):
    """March the normalized first corrector and the second one jointly.

    The second corrector's forcing g - theta_inst is evaluated from the
    stage values of the first corrector and the stored density, so the
    coupled discretization stays at the integrator's order.  Returns an
    _EdgeRecorder over ``wanted_times`` holding the (N, d, d) fields.
    """
    grid = assembled.grid
    hv = grid.cell_volume
    d = grid.dim
    n = grid.size
    state = np.concatenate(
        [np.array(kappa1_init, dtype=float), np.zeros((n, d * d))], axis=1
    )
    rec = _EdgeRecorder(wanted_times)

    def rhs(t, st, bundle, scale):
        k1s = st[:, :d]
        k2s = st[:, d:].reshape(n, d, d)
        p_here = p_lookup(t)
        b_here = -hv * scale * (p_here @ bundle.f0)
        g = _g_tilde(bundle, scale, k1s, b_here)
        th = hv * np.einsum("n,nij->ij", p_here, g)
        dk1 = scale * bundle.gen.apply(k1s) + scale * bundle.f0 + b_here[None, :]
        dk2 = scale * _apply_matrix_field(bundle, k2s) + g - th[None, :, :]
        return np.concatenate([dk1, dk2.reshape(n, d * d)], axis=1)

    def offer(t, st):
        rec(t, st[:, d:].reshape(n, d, d))

    offer(plan.edges[0], state)
    for k in range(plan.n_steps):
        t0, t1 = plan.edges[k], plan.edges[k + 1]
        h = t1 - t0
        bundle, scale = plan.bundle_of_step[k], plan.scale_of_step[k]
        k1_ = rhs(t0, state, bundle, scale)
        k2_ = rhs(t0 + 0.5 * h, state + 0.5 * h * k1_, bundle, scale)
        k3_ = rhs(t0 + 0.5 * h, state + 0.5 * h * k2_, bundle, scale)
        k4_ = rhs(t1, state + h * k3_, bundle, scale)
        state = state + (h / 6.0) * (k1_ + 2.0 * k2_ + 2.0 * k3_ + k4_)
        offer(t1, state)
    return rec


# ---------------------------------------------------------------------------
# the one-realization pipeline
# ---------------------------------------------------------------------------


def solve_cell(
    kernel: DispersalKernel,
    spec: EnvironmentSpec,
    window,
    options: Optional[CellOptions] = None,
    seed_offset: int = 0,
    path: Optional[EnvironmentPath] = None,
    moments: Optional[PeriodizedMoments] = None,
) -> CellSolution:
    """Run the full cell pipeline for one environment realization."""
    options = options or CellOptions()
    s0, s1 = float(window[0]), float(window[1])
    if not s0 < s1:
        raise ConfigurationError("cell window must be a nonempty interval")
    if moments is None:
        moments = periodize(kernel, options.n, options.tail_tolerance)
    probe_path = path or sample_environment(spec, (s0 - 1.0, s1 + 1.0), seed_offset)
    probe = AssembledEnvironment(moments, probe_path, with_transport=True)
    relax_p = options.relax_density or _relax_window(probe, options.doubling_tol, options)
    relax_k = options.relax_corrector or relax_p
    t_min = s0 - 2.0 * relax_k
    t_max = s1 + 2.0 * relax_p
    if path is None or path.t0 > t_min - 0.5 or path.t1 < t_max + 0.5:
        path = sample_environment(spec, (t_min - 1.0, t_max + 1.0), seed_offset)
    assembled = AssembledEnvironment(moments, path, with_transport=True)
    cfg = options.integrator(spec.alpha_hi)
    grid = assembled.grid
    hv = grid.cell_volume
    d = grid.dim

    samples = sample_grid(s0, s1, options.sample_dt)
    stencil_centers = _pick_stencil_centers(path, s0, s1, cfg.dt, options.residual_stencils)
    stencil_times = [t + j * cfg.dt for t in stencil_centers for j in range(-2, 3)]
    breaks = sorted(
        set(samples.tolist())
        | set(stencil_times)
        | {s0, s1, s0 - relax_k, s0 - 2.0 * relax_k}
    )

    # --- backward density pass (with doubling certificate) ----------------
    p_traj, diagnostics, p_lookup = compute_p_inf(
        assembled,
        (s0, s1),
        relax_p,
        tol=options.doubling_tol,
        options=options,
        sample_times=samples,
        collect_p=True,
        collect_lo=t_min,
        breakpoints=breaks,
        verify=options.verify_relaxation,
    )
    p_inf = p_traj.values
    beta_samples = compute_beta(p_traj, assembled)

    def beta_at(t, bundle, scale):
        return -hv * scale * (p_lookup(t) @ bundle.f0)

    def kappa1_forcing(t, bundle, scale):
        return scale * bundle.f0 + beta_at(t, bundle, scale)[None, :]

    # compatibility of the corrector forcing against the density; vanishes
    # identically when drift and density come from the same data, so any
    # sizable value flags an implementation inconsistency
    compat1 = 0.0
    for k, t in enumerate(samples):
        bundle, scale = _bundle_scale_at(assembled, float(t))
        f_field = scale * bundle.f0 + beta_samples[k][None, :]
        compat1 = max(compat1, float(np.max(np.abs(hv * (p_inf[k] @ f_field)))))
    if compat1 > 1e-8:
        raise InconsistencyError(
            f"corrector compatibility integral {compat1:.2e}; drift and density disagree"
        )

    # --- first corrector: forward relaxation from zero data ---------------
    plan_full = plan_march(assembled, t_min, s1, cfg, breakpoints=breaks)
    rec1 = _EdgeRecorder(list(samples) + stencil_times)
    _forced_march(
        plan_full.slice_between(s0 - relax_k, s1),
        np.zeros((grid.size, d)),
        kappa1_forcing,
        rec1,
    )
    kappa1_raw = rec1.stack(samples)
    shift = kappa1_raw[0].mean(axis=0)
    kappa1 = kappa1_raw - shift[None, None, :]

    if options.verify_relaxation:
        rec1b = _EdgeRecorder(list(samples))
        _forced_march(
            plan_full.slice_between(s0 - 2.0 * relax_k, s1),
            np.zeros((grid.size, d)),
            kappa1_forcing,
            rec1b,
        )
        k1b = rec1b.stack(samples)
        k1b = k1b - k1b[0].mean(axis=0)[None, None, :]
        doubling_k1 = float(
            max(grid.l2_norm(kappa1[k] - k1b[k]) for k in range(len(samples)))
        )
        diagnostics["doubling_kappa1"] = doubling_k1
        if doubling_k1 > options.doubling_tol:
            raise RelaxationError(
                f"corrector doubling gap {doubling_k1:.3e} exceeds tol",
                fitted_rate=diagnostics.get("gamma0_fit"),
                suggested_window=2.0 * relax_k,
            )

    theta_inst = compute_theta_inst(kappa1, beta_samples, p_inf, assembled, samples)

    # residual of the first-corrector equation at interior stencils (the
    # stencil fields share the raw run's constant, and the residual is
    # invariant under constant shifts)
    res_k1 = 0.0
    for c in stencil_centers:
        sten = rec1.stack([c + j * cfg.dt for j in range(-2, 3)])
        bundle, scale = _bundle_scale_at(assembled, float(c))
        rhs = scale * bundle.gen.apply(sten[2]) + kappa1_forcing(float(c), bundle, scale)
        res_k1 = max(res_k1, grid.l2_norm(_fd5(sten, cfg.dt) - rhs))
    diagnostics["residual_kappa1"] = res_k1

    # --- second corrector: coupled march with the normalized kappa1 -------
    kappa2 = None
    if options.with_kappa2:
        # starting the companion from -shift reproduces the normalized
        # first-corrector trajectory (constants are invariant under the flow)
        k1_init = np.broadcast_to(-shift, (grid.size, d)).copy()
        rec2 = _second_corrector_pass(
            assembled,
            plan_full.slice_between(s0 - relax_k, s1),
            k1_init,
            p_lookup,
            list(samples) + stencil_times,
        )
        kappa2_raw = rec2.stack(samples)
        kappa2 = kappa2_raw - kappa2_raw[0].mean(axis=0)[None, None, :, :]

        res_k2 = 0.0
        compat2 = 0.0
        for c in stencil_centers:
            sten = rec2.stack([c + j * cfg.dt for j in range(-2, 3)])
            bundle, scale = _bundle_scale_at(assembled, float(c))
            k1_here = rec1.seen[float(c)] - shift[None, :]
            b_here = beta_at(float(c), bundle, scale)
            g_here = _g_tilde(bundle, scale, k1_here, b_here)
            p_here = p_lookup(float(c))
            th_here = hv * np.einsum("n,nij->ij", p_here, g_here)
            forcing = g_here - th_here[None, :, :]
            rhs = scale * _apply_matrix_field(bundle, sten[2]) + forcing
            res_k2 = max(res_k2, grid.l2_norm(_fd5(sten, cfg.dt) - rhs))
            compat2 = max(
                compat2,
                float(np.max(np.abs(hv * np.einsum("n,nij->ij", p_here, forcing)))),
            )
        diagnostics["residual_kappa2"] = res_k2
        diagnostics["compat_kappa2"] = compat2

    beta_cum = _beta_cumulative(
        assembled, p_lookup, plan_full.slice_between(s0, s1), samples
    )

    diagnostics.update(
        {
            "pi1": float(p_inf.min()),
            "pi2": float(p_inf.max()),
            "relax_corrector": relax_k,
            "compat_kappa1": compat1,
            "beta_bound": float(spec.alpha_hi * moments.abs_moment1 * p_inf.max()),
        }
    )
    return CellSolution(
        grid=grid,
        window=(s0, s1),
        times=samples,
        p_inf=p_inf,
        beta=beta_samples,
        kappa1=kappa1,
        theta_inst=theta_inst,
        kappa2=kappa2,
        diagnostics=diagnostics,
        seed_offset=seed_offset,
        beta_cumint=beta_cum,
    )


def _beta_cumulative(assembled, p_lookup, plan, samples) -> np.ndarray:
    """Cumulative ∫ beta ds from the window start, composite Simpson per step."""
    hv = assembled.grid.cell_volume
    cum = np.zeros(assembled.grid.dim)
    out = np.zeros((len(samples), assembled.grid.dim))
    samp = np.asarray(samples)

    def store(t):
        k = int(np.searchsorted(samp, t))
        for cand in (k - 1, k):
            if 0 <= cand < samp.size and abs(samp[cand] - t) <= 1e-9 * max(1.0, abs(t)):
                out[cand] = cum

    store(plan.edges[0])
    for k in range(plan.n_steps):
        t0, t1 = plan.edges[k], plan.edges[k + 1]
        h = t1 - t0
        bundle, scale = plan.bundle_of_step[k], plan.scale_of_step[k]

        def beta(t):
            return -hv * scale * (p_lookup(t) @ bundle.f0)

        cum = cum + (h / 6.0) * (beta(t0) + 4.0 * beta(t0 + 0.5 * h) + beta(t1))
        store(t1)
    return out


def compute_kappa2_residual(solution: CellSolution) -> float:
    """Sup-over-stencils L2 residual of the second-corrector equation."""
    if solution.kappa2 is None or "residual_kappa2" not in solution.diagnostics:
        raise ConfigurationError("cell solution was computed without the second corrector")
    return float(solution.diagnostics["residual_kappa2"])


# ---------------------------------------------------------------------------
# ergodic averages: b, Theta, sigma sigma*
# ---------------------------------------------------------------------------


def _beta_time_averages_exact(
    kernel, spec, horizon: float, replicas: int, options: CellOptions, batches: int
):
    """Per-batch time averages of beta via the exact piecewise propagator."""
    moments = periodize(kernel, options.n, options.tail_tolerance)
    probe = AssembledEnvironment(
        moments, sample_environment(spec, (-1.0, 1.0), 0), with_transport=True
    )
    relax = options.relax_density or _relax_window(probe, options.doubling_tol, options)
    edges = np.linspace(0.0, horizon, batches + 1)
    per_batch = []
    for r in range(replicas):
        path = sample_environment(spec, (-1.0, horizon + relax + 1.0), seed_offset=r)
        assembled = AssembledEnvironment(moments, path, with_transport=True)
        prop = ExactPiecewisePropagator(assembled)
        integrals, _, _ = prop.drift_sweep(
            0.0, horizon, relax, integral_breaks=edges[1:-1].tolist()
        )
        per_batch.append(integrals / np.diff(edges)[:, None])
    return np.asarray(per_batch)  # (R, B, d)


def _beta_time_averages_rk4(
    kernel, spec, horizon: float, replicas: int, options: CellOptions, batches: int
):
    moments = periodize(kernel, options.n, options.tail_tolerance)
    probe = AssembledEnvironment(
        moments, sample_environment(spec, (-1.0, 1.0), 0), with_transport=True
    )
    relax = options.relax_density or _relax_window(probe, options.doubling_tol, options)
    cfg = options.integrator(spec.alpha_hi)
    edges = np.linspace(0.0, horizon, batches + 1)
    per_batch = []
    for r in range(replicas):
        path = sample_environment(spec, (-1.0, horizon + relax + 1.0), seed_offset=r)
        assembled = AssembledEnvironment(moments, path, with_transport=True)
        res = adjoint_backward_pass(
            assembled,
            np.ones(assembled.grid.size),
            horizon + relax,
            0.0,
            cfg,
            sample_times=(),
            collect_range=(0.0, horizon),
            collect_beta=True,
            breakpoints=edges.tolist(),
        )
        batch_vals = np.zeros((batches, spec.dim))
        for j in range(batches):
            batch_vals[j] = res.integrate_beta(edges[j], edges[j + 1]) / (
                edges[j + 1] - edges[j]
            )
        per_batch.append(batch_vals)
    return np.asarray(per_batch)


def compute_b(
    kernel: DispersalKernel,
    spec: EnvironmentSpec,
    horizon: float,
    replicas: int = 4,
    options: Optional[CellOptions] = None,
    batches: int = 8,
):
    """Ergodic mean drift b with a batch-means standard error.

    Averages beta over [0, horizon] for ``replicas`` independent
    realizations; the standard error comes from the spread of per-batch
    time averages.
    """
    options = options or CellOptions()
    if options.method == "exact":
        per_batch = _beta_time_averages_exact(kernel, spec, horizon, replicas, options, batches)
    else:
        per_batch = _beta_time_averages_rk4(kernel, spec, horizon, replicas, options, batches)
    flat = per_batch.reshape(-1, per_batch.shape[-1])
    b = flat.mean(axis=0)
    se = flat.std(axis=0, ddof=1) / math.sqrt(flat.shape[0]) if flat.shape[0] > 1 else np.zeros_like(b)
    return b, se


def compute_theta(
    kernel: DispersalKernel,
    spec: EnvironmentSpec,
    horizon: float,
    replicas: int = 2,
    options: Optional[CellOptions] = None,
    return_solutions: bool = False,
):
    """Effective diffusivity Theta: symmetrized time-and-replica average of
    the instantaneous matrix, with a replica-spread standard error."""
    options = options or CellOptions()
    sols = [
        solve_cell(kernel, spec, (0.0, horizon), options=options, seed_offset=r)
        for r in range(replicas)
    ]
    per_replica = np.asarray(
        [0.5 * (s.theta_inst.mean(axis=0) + s.theta_inst.mean(axis=0).T) for s in sols]
    )
    theta = per_replica.mean(axis=0)
    if replicas > 1:
        se = per_replica.std(axis=0, ddof=1) / math.sqrt(replicas)
    else:
        m = len(sols[0].times)
        half = m // 2
        a = 0.5 * (sols[0].theta_inst[:half].mean(axis=0) + sols[0].theta_inst[:half].mean(axis=0).T)
        bb = 0.5 * (sols[0].theta_inst[half:].mean(axis=0) + sols[0].theta_inst[half:].mean(axis=0).T)
        se = np.abs(a - bb) / 2.0
    if np.linalg.eigvalsh(theta).min() <= 0:
        raise StatisticalError("theta estimate not positive definite; increase horizon")
    if return_solutions:
        return theta, se, sols
    return theta, se


# --- long-run covariance of the centered drift -----------------------------


def autocovariance_matrix(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Empirical autocovariance E beta°(0) (x) beta°(lag) for lags 0..max_lag.

    ``x`` has shape (T, d); the estimator divides by T (the long-run
    variance convention) and averages over all admissible time shifts.
    """
    x = np.asarray(x, dtype=float)
    T, d = x.shape
    xc = x - x.mean(axis=0, keepdims=True)
    nfft = 1
    while nfft < 2 * T:
        nfft *= 2
    F = np.fft.rfft(xc, n=nfft, axis=0)
    out = np.empty((max_lag + 1, d, d))
    for i in range(d):
        for j in range(d):
            cc = np.fft.irfft(F[:, i].conj() * F[:, j], n=nfft)[: max_lag + 1]
            out[:, i, j] = cc / T
    return out


def integrated_covariance(
    acov: np.ndarray, dt: float, t_cov: float
) -> np.ndarray:
    """sigma sigma* = ∫_0^{t_cov} (C(t) + C(t)^T) dt by the trapezoid rule."""
    n_lags = min(acov.shape[0] - 1, int(round(t_cov / dt)))
    sym = acov[: n_lags + 1] + np.swapaxes(acov[: n_lags + 1], 1, 2)
    return np.trapezoid(sym, dx=dt, axis=0)


def choose_lag_cutoff(acov: np.ndarray, dt: float, cap: float, tail_fraction: float = 0.002):
    """Lag cutoff such that the fitted exponential tail contributes less
    than ``tail_fraction`` of the integral; returns (t_cov, rate, r2)."""
    tr = np.einsum("lii->l", acov)
    c0 = tr[0]
    if c0 <= 0:
        return min(cap, 10.0 * dt), float("nan"), 0.0
    lags = np.arange(tr.size) * dt
    mask = tr > 0.02 * c0
    # use the initial positive run only
    first_bad = np.argmin(mask) if not mask.all() else tr.size
    use = slice(0, max(int(first_bad), 3))
    rate, r2, _ = fit_exponential_decay(lags[use], np.abs(tr[use]))
    if not (rate and rate > 0 and np.isfinite(rate)):
        raise StatisticalError(
            "drift autocovariance does not decay; mixing diagnostic failed"
        )
    t_cov = min(cap, math.log(1.0 / tail_fraction) / rate)
    return float(t_cov), float(rate), float(r2)


def compute_sigma_sq(
    kernel: DispersalKernel,
    spec: EnvironmentSpec,
    horizon: float,
    replicas: int = 8,
    lag_cutoff: Optional[float] = None,
    options: Optional[CellOptions] = None,
    acf_sample_dt: float = 0.1,
):
    """Long-run covariance 2 ∫_0^{T_cov} E beta°(0)(x)beta°(t) dt (symmetrized).

    One beta trajectory per replica is sampled uniformly at
    ``acf_sample_dt``; the empirical autocovariance of each is integrated
    to the (fitted or given) lag cutoff, and estimates are averaged with
    a replica-spread standard error.  Returns a dict with the matrix,
    its standard error, the cutoff and the fitted decay rate.
    """
    options = options or CellOptions()
    moments = periodize(kernel, options.n, options.tail_tolerance)
    probe = AssembledEnvironment(
        moments, sample_environment(spec, (-1.0, 1.0), 0), with_transport=True
    )
    relax = options.relax_density or _relax_window(probe, options.doubling_tol, options)
    n_samp = int(round(horizon / acf_sample_dt))
    grid_times = np.arange(n_samp + 1) * acf_sample_dt
    per_replica = []
    rates = []
    t_covs = []
    for r in range(replicas):
        path = sample_environment(spec, (-1.0, horizon + relax + 1.0), seed_offset=r)
        assembled = AssembledEnvironment(moments, path, with_transport=True)
        if options.method == "exact":
            prop = ExactPiecewisePropagator(assembled)
            _, beta_s, _ = prop.drift_sweep(
                0.0, horizon, relax, sample_times=grid_times
            )
        else:
            cfg = options.integrator(spec.alpha_hi)
            res = adjoint_backward_pass(
                assembled,
                np.ones(assembled.grid.size),
                horizon + relax,
                0.0,
                cfg,
                collect_range=(0.0, horizon),
                collect_beta=True,
                breakpoints=grid_times.tolist(),
            )
            beta_s = np.asarray([res.beta_at(t) for t in grid_times])
        max_lag = min(n_samp - 1, int(round((horizon / 5.0) / acf_sample_dt)))
        acov = autocovariance_matrix(beta_s, max_lag)
        # degenerate (deterministic-drift) branch: no fluctuation to integrate
        scale0 = float(np.mean(np.abs(beta_s)) ** 2)
        if float(np.einsum("lii->l", acov)[0]) <= max(1e-24, 1e-18 * scale0):
            per_replica.append(np.zeros((beta_s.shape[1], beta_s.shape[1])))
            rates.append(float("nan"))
            t_covs.append(0.0)
            continue
        if lag_cutoff is None:
            t_cov, rate, _ = choose_lag_cutoff(acov, acf_sample_dt, cap=horizon / 5.0)
        else:
            t_cov, rate = float(lag_cutoff), float("nan")
        per_replica.append(integrated_covariance(acov, acf_sample_dt, t_cov))
        rates.append(rate)
        t_covs.append(t_cov)
    per_replica = np.asarray(per_replica)
    sigma_sq = per_replica.mean(axis=0)
    if replicas > 1:
        se = per_replica.std(axis=0, ddof=1) / math.sqrt(replicas)
    else:
        se = np.abs(sigma_sq) * 0.5
    finite_rates = [r for r in rates if np.isfinite(r)]
    return {
        "sigma_sq": sigma_sq,
        "se": se,
        "t_cov": float(np.mean(t_covs)),
        "decay_rate": float(np.mean(finite_rates)) if finite_rates else None,
        "per_replica": per_replica,
    }


def compute_effective_model(
    kernel: DispersalKernel,
    spec: EnvironmentSpec,
    drift_horizon: float = 400.0,
    theta_horizon: float = 100.0,
    cov_horizon: float = 1000.0,
    replicas: int = 4,
    cov_replicas: int = 8,
    options: Optional[CellOptions] = None,
    with_sigma: bool = True,
) -> EffectiveModel:
    """Assemble the full effective model (b, Theta, sigma sigma*)."""
    options = options or CellOptions()
    b, b_se = compute_b(kernel, spec, drift_horizon, replicas=replicas, options=options)
    theta, theta_se = compute_theta(
        kernel, spec, theta_horizon, replicas=max(2, replicas // 2), options=options
    )
    sigma_sq = sigma_se = None
    sig_meta = {}
    if with_sigma:
        sig = compute_sigma_sq(
            kernel, spec, cov_horizon, replicas=cov_replicas, options=options
        )
        sigma_sq, sigma_se = sig["sigma_sq"], sig["se"]
        sigma_sq = 0.5 * (sigma_sq + sigma_sq.T)
        w = np.linalg.eigvalsh(sigma_sq)
        if w.min() < 0:
            if abs(w.min()) > 3.0 * float(np.max(sigma_se)) + 1e-12:
                raise StatisticalError("long-run covariance significantly indefinite")
            # statistical wiggle only: project onto the PSD cone
            ww, V = np.linalg.eigh(sigma_sq)
            sigma_sq = (V * np.clip(ww, 0.0, None)) @ V.T
        sig_meta = {"t_cov": sig["t_cov"], "decay_rate": sig["decay_rate"]}
        sigma_se = np.asarray(sigma_se)
    provenance = {
        "kernel": {
            "family": kernel.family,
            "dim": kernel.dim,
            "width": kernel.width,
            "center": list(kernel.center),
        },
        "environment": spec.to_dict(),
        "n": options.n,
        "dt_factor": options.dt_factor,
        "sample_dt": options.sample_dt,
        "drift_horizon": drift_horizon,
        "theta_horizon": theta_horizon,
        "cov_horizon": cov_horizon,
        "replicas": replicas,
        "cov_replicas": cov_replicas,
        "method": options.method,
        **sig_meta,
    }
    return EffectiveModel(
        b=b,
        b_se=b_se,
        theta=theta,
        theta_se=theta_se,
        sigma_sq=sigma_sq,
        sigma_sq_se=sigma_se,
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# time-constant special case (direct stationary solves)
# ---------------------------------------------------------------------------


def autonomous_effective_model(moments: PeriodizedMoments, mu_slice: np.ndarray):
    """Effective drift and diffusivity for a frozen rate slice.

    Solves the stationary adjoint problem A* v0 = 0 with unit mass and the
    stationary corrector problem A k1 = -f directly (dense linear solves),
    then evaluates the same quadratures as the time-dependent pipeline.
    Returns (b, theta, v0, kappa1).
    """
    from .kernels import assemble_generator

    gen = assemble_generator(moments, mu_slice)
    grid = moments.grid
    hv = grid.cell_volume
    n = grid.size
    d = grid.dim
    A = gen.matrix()
    Aadj = gen.adjoint_matrix()
    # unit-mass stationary density: replace one row by the mass constraint
    M = Aadj.copy()
    M[-1, :] = hv
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    v0 = np.linalg.solve(M, rhs)
    w1 = moments.m1_matrices * mu_slice[None, :, :] * hv
    f0 = -np.einsum("inm->ni", w1)
    b = -hv * (v0 @ f0)
    # stationary corrector with zero grid mean (solvable: forcing is
    # orthogonal to the stationary density by construction of b)
    M2 = A.copy()
    M2[-1, :] = 1.0 / n
    k1 = np.zeros((n, d))
    for i in range(d):
        rhs_i = -(f0[:, i] + b[i])
        rhs_i[-1] = 0.0
        k1[:, i] = np.linalg.solve(M2, rhs_i)
    t2 = 0.5 * hv * np.einsum("ijnm,nm->nij", moments.m2_matrices, mu_slice)
    g = np.einsum("ni,j->nij", k1, b) + t2 - np.einsum("inm,mj->nij", w1, k1)
    theta = hv * np.einsum("n,nij->ij", v0, g)
    return b, theta, v0, k1

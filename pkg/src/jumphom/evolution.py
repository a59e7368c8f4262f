"""Time integration on the discrete torus.

The forward flow d/dt u = A(t) u and the backward adjoint flow
-d/dt p = A*(t) p are integrated with the classic explicit 4-stage
one-step method.  A(t) is a bounded operator (infinity norm at most
2*alpha_hi), so there is no stiffness; the step is capped at
0.1 / (2*alpha_hi) and steps never straddle an environment switch, which
keeps the piecewise-in-time structure exact and lets dense
matrix-exponential products serve as an oracle.

For Monte Carlo throughput an exact per-segment propagator
(eigendecomposition of each profile generator) is available for
piecewise-constant environments; it is an internal fast path with the
same contract and is cross-checked against the 4-stage integrator in the
test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .environment import EnvironmentPath, EnvironmentSpec
from .errors import ConfigurationError, DimensionError, DomainError
from .grids import FieldTrajectory, TorusGrid
from .kernels import GeneratorPair, PeriodizedMoments, assemble_generator


def stability_cap(alpha_hi: float) -> float:
    return 0.1 / (2.0 * alpha_hi)


@dataclass(frozen=True)
class IntegratorConfig:
    """Fixed explicit 4-stage one-step scheme with a hard step cap."""

    dt: float

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigurationError("time step must be positive")

    def validate(self, alpha_hi: float) -> None:
        cap = stability_cap(alpha_hi)
        if self.dt > cap * (1.0 + 1e-12):
            raise ConfigurationError(
                f"dt={self.dt:.6g} exceeds stability cap {cap:.6g} (= 0.1/(2*alpha_hi))"
            )

    @staticmethod
    def from_band(alpha_hi: float, factor: float = 0.25) -> "IntegratorConfig":
        if not 0 < factor <= 1:
            raise ConfigurationError("cap factor must be in (0, 1]")
        return IntegratorConfig(dt=stability_cap(alpha_hi) * factor)


# ---------------------------------------------------------------------------
# operator bundles: one assembled generator per profile
# ---------------------------------------------------------------------------


@dataclass
class OperatorBundle:
    """Generator plus the transport contractions needed by the cell problems."""

    gen: GeneratorPair
    f0: Optional[np.ndarray] = None  # (N, d): -∫ z a(z) mu(xi, xi-z) dz
    t2: Optional[np.ndarray] = None  # (N, d, d): 0.5 ∫ z(x)z a mu dz
    w1: Optional[np.ndarray] = None  # (d, N, N): h^d M1^i(xi-eta) mu(xi,eta)

    def g_tilde(self, kappa1: np.ndarray, beta: np.ndarray) -> np.ndarray:
        """Second-corrector forcing field (N, d, d) for given kappa1 and beta."""
        out = np.einsum("ni,j->nij", kappa1, beta)
        out += self.t2
        out -= np.einsum("inm,mj->nij", self.w1, kappa1)
        return out


class AssembledEnvironment:
    """Per-profile generators for one environment path on one grid.

    Assembles each profile once; the piecewise-constant path then selects
    a (bundle, scale) pair per segment.  ``with_transport=True`` also
    tabulates the first/second moment contractions used by the cell
    module.
    """

    def __init__(
        self,
        moments: PeriodizedMoments,
        path: EnvironmentPath,
        with_transport: bool = False,
    ):
        self.moments = moments
        self.path = path
        self.grid = moments.grid
        self.with_transport = with_transport
        spec = path.spec
        if spec.dim != moments.dim:
            raise DimensionError("environment and kernel dimensions differ")
        pts = self.grid.points()
        # on a period-P torus the profile sees the microscopic coordinate
        pts_mod = np.mod(pts, 1.0)
        if spec.model == "markov_switching":
            profiles = spec.profiles
        else:
            profiles = (spec.profiles[0],)
        self.bundles = [self._build(p.pair_matrix(pts_mod)) for p in profiles]

    def with_path(self, path: EnvironmentPath) -> "AssembledEnvironment":
        """Shallow rebind to another realization of the same spec (bundles
        depend only on the profiles, so they are shared)."""
        if path.spec.to_dict() != self.path.spec.to_dict():
            raise ConfigurationError("paths must come from the same environment spec")
        clone = object.__new__(AssembledEnvironment)
        clone.moments = self.moments
        clone.grid = self.grid
        clone.with_transport = self.with_transport
        clone.bundles = self.bundles
        clone.path = path
        return clone

    def _build(self, mu_slice: np.ndarray) -> OperatorBundle:
        gen = assemble_generator(self.moments, mu_slice)
        if not self.with_transport:
            return OperatorBundle(gen=gen)
        hv = self.grid.cell_volume
        w1 = self.moments.m1_matrices * mu_slice[None, :, :] * hv
        f0 = -np.einsum("inm->ni", w1)
        t2 = 0.5 * hv * np.einsum("ijnm,nm->nij", self.moments.m2_matrices, mu_slice)
        return OperatorBundle(gen=gen, f0=f0, t2=t2, w1=w1)

    @property
    def alpha_hi(self) -> float:
        return self.path.spec.alpha_hi

    def segment_ops(self, a: float, b: float):
        """Yield (t_start, t_end, bundle, scale) covering [a, b]."""
        product = self.path.spec.model == "product_scalar"
        for s0, s1, state in self.path.segments(a, b):
            if product:
                yield s0, s1, self.bundles[0], float(self.path.spec.lambda_values[state])
            elif self.path.spec.model == "markov_switching":
                yield s0, s1, self.bundles[state], 1.0
            else:
                yield s0, s1, self.bundles[0], 1.0


# ---------------------------------------------------------------------------
# march planning: step edges aligned to switches and sample times
# ---------------------------------------------------------------------------


@dataclass
class MarchPlan:
    """Precomputed step layout: edges, per-step bundle and scale."""

    edges: np.ndarray  # (M+1,) strictly increasing
    bundle_of_step: list
    scale_of_step: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.edges) - 1

    def index_of(self, t: float) -> int:
        k = int(np.searchsorted(self.edges, t))
        for cand in (k - 1, k, k + 1):
            if 0 <= cand < len(self.edges) and abs(self.edges[cand] - t) <= 1e-9 * max(
                1.0, abs(t)
            ):
                return cand
        raise DimensionError(f"time {t} is not an edge of this march plan")

    def slice_between(self, a: float, b: float) -> "MarchPlan":
        ia, ib = self.index_of(a), self.index_of(b)
        return MarchPlan(
            edges=self.edges[ia : ib + 1],
            bundle_of_step=self.bundle_of_step[ia:ib],
            scale_of_step=self.scale_of_step[ia:ib],
        )


def plan_march(
    assembled: AssembledEnvironment,
    t0: float,
    t1: float,
    cfg: IntegratorConfig,
    breakpoints: Sequence[float] = (),
) -> MarchPlan:
    """Chop [t0, t1] into RK steps aligned to switches and breakpoints."""
    cfg.validate(assembled.alpha_hi)
    extra = sorted(t for t in set(float(b) for b in breakpoints) if t0 < t < t1)
    edges: list = []
    bundles: list = []
    scales: list = []
    for s0, s1, bundle, scale in assembled.segment_ops(t0, t1):
        cuts = [s0] + [t for t in extra if s0 < t < s1] + [s1]
        for a, b in zip(cuts[:-1], cuts[1:]):
            if b - a <= 1e-14:
                continue
            m = max(1, int(math.ceil((b - a) / cfg.dt - 1e-12)))
            sub = a + (b - a) * np.arange(m + 1) / m
            if edges:
                sub = sub[1:]
            edges.extend(sub.tolist())
            bundles.extend([bundle] * m)
            scales.extend([scale] * m)
    return MarchPlan(
        edges=np.asarray(edges),
        bundle_of_step=bundles,
        scale_of_step=np.asarray(scales),
    )


def _rk4_autonomous(apply_op, v: np.ndarray, h: float) -> np.ndarray:
    k1 = apply_op(v)
    k2 = apply_op(v + (0.5 * h) * k1)
    k3 = apply_op(v + (0.5 * h) * k2)
    k4 = apply_op(v + h * k3)
    return v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_forced(apply_op, v, h, f0, f_half, f1):
    k1 = apply_op(v) + f0
    k2 = apply_op(v + (0.5 * h) * k1) + f_half
    k3 = apply_op(v + (0.5 * h) * k2) + f_half
    k4 = apply_op(v + h * k3) + f1
    return v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class _SampleRecorder:
    def __init__(self, sample_times, tol=1e-9):
        self.wanted = np.asarray(sorted(sample_times), dtype=float)
        self.tol = tol
        self.times: list = []
        self.values: list = []

    def offer(self, t: float, v: np.ndarray):
        if self.wanted.size == 0:
            return
        k = int(np.searchsorted(self.wanted, t))
        for cand in (k - 1, k):
            if 0 <= cand < self.wanted.size and abs(
                self.wanted[cand] - t
            ) <= self.tol * max(1.0, abs(t)):
                if not self.times or abs(self.times[-1] - t) > self.tol:
                    self.times.append(float(t))
                    self.values.append(v.copy())
                return


# ---------------------------------------------------------------------------
# public evolution operations
# ---------------------------------------------------------------------------


def evolve_forward(
    u0: np.ndarray,
    assembled: AssembledEnvironment,
    t0: float,
    t1: float,
    cfg: IntegratorConfig,
    sample_times: Sequence[float],
) -> FieldTrajectory:
    """Integrate d/dt u = A(t) u from u(t0) = u0, recording at sample times."""
    if not t0 < t1:
        raise DomainError("need t0 < t1")
    plan = plan_march(assembled, t0, t1, cfg, breakpoints=sample_times)
    rec = _SampleRecorder(sample_times)
    v = np.array(u0, dtype=float)
    rec.offer(plan.edges[0], v)
    for k in range(plan.n_steps):
        h = plan.edges[k + 1] - plan.edges[k]
        bundle, scale = plan.bundle_of_step[k], plan.scale_of_step[k]
        if scale == 1.0:
            v = _rk4_autonomous(bundle.gen.apply, v, h)
        else:
            v = _rk4_autonomous(lambda w: scale * bundle.gen.apply(w), v, h)
        rec.offer(plan.edges[k + 1], v)
    return FieldTrajectory(
        grid=assembled.grid, times=np.asarray(rec.times), values=np.asarray(rec.values)
    )


@dataclass
class BackwardPassResult:
    """Backward adjoint sweep output: samples plus half-grid recordings.

    ``half_times`` is the ascending list of full and half step points in
    the requested collection range, with ``p_half`` the density there (p
    is continuous, so no sidedness arises).  The drift functional
    h^d * p(s)^T (-f0) jumps at switches, so it is recorded per march
    step instead: ``beta_step_edges`` (K+1,) are the step boundaries and
    ``beta_steps`` (K, 3, d) holds its values at the left edge, midpoint
    and right edge of each step, all evaluated with that step's own rate
    slice; that is exactly the layout composite-Simpson integration and
    right-continuous point lookups need.
    """

    trajectory: FieldTrajectory
    half_times: Optional[np.ndarray] = None
    p_half: Optional[np.ndarray] = None
    beta_step_edges: Optional[np.ndarray] = None
    beta_steps: Optional[np.ndarray] = None
    mass_drift: float = 0.0

    def beta_at(self, t: float) -> np.ndarray:
        """Right-continuous drift value at a step edge."""
        k = int(np.searchsorted(self.beta_step_edges, t))
        for cand in (k, k - 1, k + 1):
            if 0 <= cand < self.beta_step_edges.size and abs(
                self.beta_step_edges[cand] - t
            ) <= 1e-9 * max(1.0, abs(t)):
                if cand < self.beta_steps.shape[0]:
                    return self.beta_steps[cand, 0]
                return self.beta_steps[cand - 1, 2]
        raise DimensionError(f"time {t} is not a recorded step edge")

    def integrate_beta(self, lo: float, hi: float) -> np.ndarray:
        """Composite-Simpson ∫ beta ds over [lo, hi] (step-edge aligned)."""
        edges = self.beta_step_edges
        i0 = int(np.searchsorted(edges, lo - 1e-12))
        i1 = int(np.searchsorted(edges, hi - 1e-12))
        if abs(edges[i0] - lo) > 1e-9 * max(1.0, abs(lo)) or abs(
            edges[i1] - hi
        ) > 1e-9 * max(1.0, abs(hi)):
            raise DimensionError("integration bounds must be step edges")
        h = np.diff(edges[i0 : i1 + 1])
        chunk = self.beta_steps[i0:i1]
        contrib = (chunk[:, 0] + 4.0 * chunk[:, 1] + chunk[:, 2]) * h[:, None] / 6.0
        return contrib.sum(axis=0)


def adjoint_backward_pass(
    assembled: AssembledEnvironment,
    terminal: np.ndarray,
    t_terminal: float,
    t_stop: float,
    cfg: IntegratorConfig,
    sample_times: Sequence[float] = (),
    collect_range: Optional[tuple] = None,
    collect_beta: bool = False,
    collect_p: bool = False,
    breakpoints: Optional[Sequence[float]] = None,
) -> BackwardPassResult:
    """Integrate -d/dt p = A*(t) p from p(t_terminal) = terminal down to t_stop.

    Full steps are split in two half-steps so the drift functional (and
    optionally p itself) can be recorded on the half grid that the forced
    forward stages of the corrector passes need.
    """
    if not t_stop < t_terminal:
        raise DomainError("need t_stop < t_terminal")
    all_breaks = set(float(t) for t in sample_times)
    if breakpoints is not None:
        all_breaks |= set(float(t) for t in breakpoints)
    plan = plan_march(assembled, t_stop, t_terminal, cfg, breakpoints=sorted(all_breaks))
    collect = collect_beta or collect_p
    if collect and collect_range is None:
        collect_range = (t_stop, t_terminal)
    if collect_beta and not assembled.with_transport:
        raise ConfigurationError("beta collection needs transport operators")
    rec = _SampleRecorder(sample_times)
    half_times: list = []
    p_half: list = []
    beta_rows: list = []  # (t_left, b_left, b_mid, b_right) per step, reversed
    hv = assembled.grid.cell_volume

    def in_range(t):
        return collect_range[0] - 1e-12 <= t <= collect_range[1] + 1e-12

    p = np.array(terminal, dtype=float)
    mass0 = float(p.sum() * hv)
    rec.offer(plan.edges[-1], p)
    max_mass_err = 0.0
    for k in range(plan.n_steps - 1, -1, -1):
        t_right, t_left = plan.edges[k + 1], plan.edges[k]
        bundle, scale = plan.bundle_of_step[k], plan.scale_of_step[k]
        if scale == 1.0:
            apply_adj = bundle.gen.apply_adjoint
        else:
            apply_adj = lambda w, s=scale, b=bundle: s * b.gen.apply_adjoint(w)
        step_collect = collect and in_range(t_left) and in_range(t_right)
        if collect_p and step_collect:
            half_times.append(float(t_right))
            p_half.append(p.copy())
        p_right = p
        h = 0.5 * (t_right - t_left)
        p = _rk4_autonomous(apply_adj, p, h)
        p_mid = p
        if collect_p and step_collect:
            half_times.append(float(t_right - h))
            p_half.append(p.copy())
        p = _rk4_autonomous(apply_adj, p, h)
        if collect_p and step_collect and k == 0:
            half_times.append(float(t_left))
            p_half.append(p.copy())
        if collect_beta and step_collect:
            factor = -hv * scale
            beta_rows.append(
                (
                    float(t_left),
                    float(t_right),
                    factor * (p @ bundle.f0),
                    factor * (p_mid @ bundle.f0),
                    factor * (p_right @ bundle.f0),
                )
            )
        rec.offer(t_left, p)
        max_mass_err = max(max_mass_err, abs(float(p.sum() * hv) - mass0))
    rec.times.reverse()
    rec.values.reverse()
    traj = FieldTrajectory(
        grid=assembled.grid, times=np.asarray(rec.times), values=np.asarray(rec.values)
    )
    result = BackwardPassResult(trajectory=traj, mass_drift=max_mass_err)
    if collect_p and half_times:
        order = np.argsort(half_times)
        ht = np.asarray(half_times)[order]
        keep = np.ones(ht.size, dtype=bool)
        keep[1:] = np.diff(ht) > 1e-12
        result.half_times = ht[keep]
        result.p_half = np.asarray(p_half)[order][keep]
    if collect_beta and beta_rows:
        beta_rows.reverse()
        lefts = np.asarray([r[0] for r in beta_rows])
        result.beta_step_edges = np.append(lefts, beta_rows[-1][1])
        result.beta_steps = np.stack(
            [np.stack([r[2], r[3], r[4]]) for r in beta_rows], axis=0
        )
    return result


def evolve_adjoint_backward(
    terminal: np.ndarray,
    assembled: AssembledEnvironment,
    t_terminal: float,
    t_stop: float,
    cfg: IntegratorConfig,
    sample_times: Sequence[float],
) -> FieldTrajectory:
    """Backward adjoint solution recorded at sample times (ascending)."""
    res = adjoint_backward_pass(
        assembled, terminal, t_terminal, t_stop, cfg, sample_times=sample_times
    )
    return res.trajectory


def forced_forward_march(
    plan: MarchPlan,
    v0: np.ndarray,
    forcing,
    on_edge=None,
) -> np.ndarray:
    """Integrate d/dt v = scale*A(t) v + f(t) along a precomputed plan.

    ``forcing(t, bundle, scale)`` must return the forcing consistent with
    the step's rate slice (stages sit at the step ends and midpoint);
    ``on_edge(t, v)`` is called at every edge including the first.
    Returns the final state.
    """
    v = np.array(v0, dtype=float)
    if on_edge is not None:
        on_edge(plan.edges[0], v)
    for k in range(plan.n_steps):
        t0, t1 = plan.edges[k], plan.edges[k + 1]
        h = t1 - t0
        bundle, scale = plan.bundle_of_step[k], plan.scale_of_step[k]
        if scale == 1.0:
            apply_op = bundle.gen.apply
        else:
            apply_op = lambda w, s=scale, b=bundle: s * b.gen.apply(w)
        f0 = forcing(t0, bundle, scale)
        f_half = forcing(t0 + 0.5 * h, bundle, scale)
        f1 = forcing(t1, bundle, scale)
        v = _rk4_forced(apply_op, v, h, f0, f_half, f1)
        if on_edge is not None:
            on_edge(t1, v)
    return v


def duality_check(u_traj: FieldTrajectory, p_traj: FieldTrajectory) -> float:
    """Relative drift of the pairing (u(t), p(t)) along common sample times."""
    if len(u_traj) != len(p_traj) or not np.allclose(u_traj.times, p_traj.times):
        raise DimensionError("trajectories must share sample times")
    hv = u_traj.grid.cell_volume
    pair = np.einsum("kn,kn->k", u_traj.values, p_traj.values) * hv
    ref = pair[0]
    scale = max(abs(ref), 1e-300)
    return float(np.max(np.abs(pair - ref)) / scale)


def transpose_identity_gap(gen: GeneratorPair, v: np.ndarray, w: np.ndarray) -> float:
    """| (A v, w) - (v, A* w) | with the torus inner product."""
    hv = gen.grid.cell_volume
    left = float(np.dot(gen.apply(v), w) * hv)
    right = float(np.dot(v, gen.apply_adjoint(w)) * hv)
    return abs(left - right)


def fit_exponential_decay(times, values, floor: float = 1e-14):
    """Least-squares fit of values ~ C exp(-rate t); returns (rate, r2, logC).

    Only strictly positive values above ``floor`` enter the fit.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    mask = values > floor
    if mask.sum() < 3:
        return float("nan"), 0.0, float("nan")
    t, y = times[mask], np.log(values[mask])
    A = np.stack([np.ones_like(t), -t], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[1]), r2, float(coef[0])


# ---------------------------------------------------------------------------
# exact piecewise propagator (fast path for piecewise-constant environments)
# ---------------------------------------------------------------------------


class ExactPiecewisePropagator:
    """Exact segment-wise evolution via eigendecomposition of each profile.

    For a piecewise-constant environment the generator is constant on
    each segment and exp(tau A) is exact, so backward stationary-density
    sweeps and time integrals of the drift functional cost O(N^2) per
    segment independently of segment length.  Decomposition quality is
    verified at construction; ill-conditioned profiles raise and callers
    fall back to the 4-stage integrator.
    """

    def __init__(self, assembled: AssembledEnvironment, check_tol: float = 1e-8):
        if not assembled.with_transport:
            raise ConfigurationError("propagator needs transport operators")
        self.assembled = assembled
        self.grid = assembled.grid
        self._eig = []
        for bundle in assembled.bundles:
            A = bundle.gen.matrix()
            lam, V = np.linalg.eig(A)
            Vinv = np.linalg.inv(V)
            err = np.max(np.abs(V @ (lam[:, None] * Vinv) - A))
            scale = max(np.max(np.abs(A)), 1e-300)
            if err / scale > check_tol:
                raise ConfigurationError(
                    "profile generator eigendecomposition too ill-conditioned "
                    f"(reconstruction error {err / scale:.2e})"
                )
            v1 = -bundle.f0  # (N, d); beta(s) = h^d p(s)^T v1
            self._eig.append(
                {
                    "lam": lam,
                    "Vt": np.ascontiguousarray(V.T),
                    "Vit": np.ascontiguousarray(Vinv.T),
                    "vv": Vinv @ v1,
                }
            )

    def _ops_for(self, state: int):
        spec = self.assembled.path.spec
        if spec.model == "markov_switching":
            return self._eig[state], 1.0
        if spec.model == "product_scalar":
            return self._eig[0], float(spec.lambda_values[state])
        return self._eig[0], 1.0

    @staticmethod
    def _phi(lam: np.ndarray, tau1: float, tau2: float) -> np.ndarray:
        """∫_{tau1}^{tau2} exp(lam u) du, stable for lam ~ 0."""
        small = np.abs(lam) * max(abs(tau1), abs(tau2)) < 1e-10
        lam_safe = np.where(small, 1.0, lam)
        out = (np.exp(lam_safe * tau2) - np.exp(lam_safe * tau1)) / lam_safe
        mid = 0.5 * (tau1 + tau2)
        return np.where(small, (tau2 - tau1) * (1.0 + lam * mid), out)

    def drift_sweep(
        self,
        s_lo: float,
        s_hi: float,
        relax: float,
        integral_breaks: Sequence[float] = (),
        sample_times: Sequence[float] = (),
        path: Optional[EnvironmentPath] = None,
    ):
        """Stationary-density backward sweep and exact drift integrals.

        Relaxes the adjoint density backward from terminal 1 at
        ``s_hi + relax``, then returns

        * ``integrals``: exact ∫ beta(s) ds over consecutive intervals of
          ``[s_lo, *integral_breaks, s_hi]``, shape (n_intervals, d);
        * ``samples``: beta at ``sample_times``, shape (n_samples, d);
        * ``p_lo``: the density at s_lo.
        """
        if path is None:
            path = self.assembled.path
        elif path.spec.to_dict() != self.assembled.path.spec.to_dict():
            raise ConfigurationError("path must come from the same environment spec")
        hv = self.grid.cell_volume
        breaks = [float(b) for b in integral_breaks if s_lo < b < s_hi]
        samples_wanted = np.asarray(sorted(sample_times), dtype=float)
        # backward: store p at the right edge of every segment, from
        # terminal 1 at s_hi+relax down to s_lo
        segs = list(path.segments(s_lo, s_hi + relax))
        p = np.ones(self.grid.size)
        p_right = [None] * len(segs)
        for idx in range(len(segs) - 1, -1, -1):
            a, b, state = segs[idx]
            ops, scale = self._ops_for(state)
            p_right[idx] = p
            c = ops["Vt"] @ p.astype(complex)
            c *= np.exp(scale * ops["lam"] * (b - a))
            p = np.real(ops["Vit"] @ c)
        p_lo = p
        # forward: exact integrals of beta over [s_lo, s_hi] pieces
        edges = [s_lo] + breaks + [s_hi]
        integrals = np.zeros((len(edges) - 1, self.assembled.bundles[0].f0.shape[1]))
        samples = np.zeros((samples_wanted.size, integrals.shape[1]))
        for idx, (a, b, state) in enumerate(segs):
            if a >= s_hi - 1e-14:
                break
            ops, scale = self._ops_for(state)
            c = ops["Vt"] @ p_right[idx].astype(complex)
            lam_eff = scale * ops["lam"]
            b_eff = min(b, s_hi)
            for j in range(len(edges) - 1):
                lo = max(edges[j], a)
                hi = min(edges[j + 1], b_eff)
                if hi - lo <= 1e-14:
                    continue
                phi = self._phi(lam_eff, b - hi, b - lo)
                integrals[j] += hv * np.real((phi * c) @ ops["vv"])
            if samples_wanted.size:
                in_seg = (samples_wanted >= a - 1e-12) & (samples_wanted < b_eff - 1e-12)
                if b_eff >= s_hi - 1e-14:
                    in_seg |= np.isclose(samples_wanted, s_hi)
                for idx in np.nonzero(in_seg)[0]:
                    w = np.exp(lam_eff * (b - samples_wanted[idx])) * c
                    samples[idx] = hv * np.real(w @ ops["vv"])
        return integrals, samples, p_lo

"""Random rate environments: periodic profiles switched by a stationary chain.

Three generative models are supported:

* ``markov_switching``: the active profile is resampled uniformly from the
  profile list at the events of a rate-``switching_rate`` Poisson clock.
  The chain starts from its stationary (uniform) law, so the law of the
  path does not depend on the time origin, and the autocorrelation of any
  profile functional decays exactly like exp(-rate * t).
* ``product_scalar``: a single spatial profile mu0 modulated by a scalar
  process lambda(t), itself a uniform resampling chain over
  ``lambda_values``.
* ``constant_in_time``: a single frozen profile.

Rates are uniformly bounded: every generated value of mu lies inside
``[alpha_lo, alpha_hi]`` by construction (profile bounds are validated at
spec creation).  Sub-seeds are derived from the master seed with numpy's
SeedSequence spawn keys so replicas are independent and exactly
replayable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError

MODELS = ("markov_switching", "product_scalar", "constant_in_time")


@dataclass(frozen=True)
class ProfileTerm:
    amplitude: float
    phase: float
    k_xi: tuple
    k_eta: tuple


@dataclass(frozen=True)
class PeriodicProfile:
    """Truncated trigonometric expansion of a rate profile on the 2d-torus.

    mu(xi, eta) = offset + sum_m amp_m * cos(2 pi (k_xi . xi + k_eta . eta) + phase_m)

    1-periodic in every coordinate of xi and eta by construction; the
    attainable range is bracketed by offset +- sum |amp|.
    """

    dim: int
    offset: float
    terms: tuple = ()

    def __post_init__(self):
        for t in self.terms:
            if len(t.k_xi) != self.dim or len(t.k_eta) != self.dim:
                raise ConfigurationError("profile term wavevector has wrong dimension")

    def lower_bound(self) -> float:
        return self.offset - sum(abs(t.amplitude) for t in self.terms)

    def upper_bound(self) -> float:
        return self.offset + sum(abs(t.amplitude) for t in self.terms)

    def __call__(self, xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
        """Evaluate on broadcastable point arrays of shape (..., d)."""
        xi = np.asarray(xi, dtype=float)
        eta = np.asarray(eta, dtype=float)
        out = np.full(np.broadcast_shapes(xi.shape[:-1], eta.shape[:-1]), self.offset)
        for t in self.terms:
            arg = xi @ np.asarray(t.k_xi, dtype=float) + eta @ np.asarray(
                t.k_eta, dtype=float
            )
            out = out + t.amplitude * np.cos(2.0 * math.pi * arg + t.phase)
        return out

    def pair_matrix(self, points: np.ndarray) -> np.ndarray:
        """mu evaluated on all ordered point pairs, shape (N, N)."""
        return self(points[:, None, :], points[None, :, :])

    def is_swap_symmetric(self, points: np.ndarray, tol: float = 1e-12) -> bool:
        m = self.pair_matrix(points)
        return bool(np.max(np.abs(m - m.T)) <= tol * max(1.0, float(np.max(np.abs(m)))))

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "offset": self.offset,
            "terms": [
                {
                    "amplitude": t.amplitude,
                    "phase": t.phase,
                    "k_xi": list(t.k_xi),
                    "k_eta": list(t.k_eta),
                }
                for t in self.terms
            ],
        }

    @staticmethod
    def from_dict(data: dict) -> "PeriodicProfile":
        terms = tuple(
            ProfileTerm(
                amplitude=float(t["amplitude"]),
                phase=float(t["phase"]),
                k_xi=tuple(int(k) for k in t["k_xi"]),
                k_eta=tuple(int(k) for k in t["k_eta"]),
            )
            for t in data.get("terms", [])
        )
        return PeriodicProfile(dim=int(data["dim"]), offset=float(data["offset"]), terms=terms)


def constant_profile(value: float, dim: int = 1) -> PeriodicProfile:
    return PeriodicProfile(dim=dim, offset=value)


def trig_profile(dim, offset, components) -> PeriodicProfile:
    """Build a profile from (amplitude, phase, k_xi, k_eta) tuples."""
    terms = tuple(
        ProfileTerm(amplitude=a, phase=p, k_xi=tuple(kx), k_eta=tuple(ke))
        for (a, p, kx, ke) in components
    )
    return PeriodicProfile(dim=dim, offset=offset, terms=terms)


def random_profile(
    rng: np.random.Generator,
    alpha_lo: float,
    alpha_hi: float,
    dim: int = 1,
    n_terms: int = 3,
    max_mode: int = 2,
    symmetric: bool = False,
    margin: float = 0.05,
) -> PeriodicProfile:
    """Random low-order profile guaranteed to stay inside [alpha_lo, alpha_hi].

    Amplitudes are rescaled so the worst-case excursion fits strictly
    inside the band (relative ``margin`` kept clear on both sides).  With
    ``symmetric=True`` the profile satisfies mu(xi, eta) = mu(eta, xi).
    """
    lo = alpha_lo + margin * (alpha_hi - alpha_lo)
    hi = alpha_hi - margin * (alpha_hi - alpha_lo)
    offset = 0.5 * (lo + hi)
    budget = 0.5 * (hi - lo)
    raw = []
    for _ in range(n_terms):
        amp = rng.uniform(0.3, 1.0)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        k_xi = tuple(int(k) for k in rng.integers(-max_mode, max_mode + 1, size=dim))
        k_eta = tuple(int(k) for k in rng.integers(-max_mode, max_mode + 1, size=dim))
        if all(k == 0 for k in k_xi) and all(k == 0 for k in k_eta):
            k_xi = tuple([1] + [0] * (dim - 1))
        raw.append((amp, phase, k_xi, k_eta))
        if symmetric and k_xi != k_eta:
            raw.append((amp, phase, k_eta, k_xi))
    total = sum(a for a, _, _, _ in raw)
    scale = budget / total
    return trig_profile(dim, offset, [(a * scale, p, kx, ke) for (a, p, kx, ke) in raw])


@dataclass(frozen=True)
class EnvironmentSpec:
    """Generative model of the random rate field, with hard bounds and a seed."""

    model: str
    profiles: tuple
    alpha_lo: float
    alpha_hi: float
    seed: int
    switching_rate: float = 1.0
    lambda_values: Optional[tuple] = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigurationError(f"unknown environment model {self.model!r}")
        if not (0.0 < self.alpha_lo <= self.alpha_hi):
            raise ConfigurationError("need 0 < alpha_lo <= alpha_hi")
        if len(self.profiles) == 0:
            raise ConfigurationError("at least one profile is required")
        dims = {p.dim for p in self.profiles}
        if len(dims) != 1:
            raise ConfigurationError("profiles must share one dimension")
        if self.model == "markov_switching":
            if self.switching_rate <= 0:
                raise ConfigurationError("switching_rate must be positive")
            for p in self.profiles:
                self._check_band(p.lower_bound(), p.upper_bound())
        elif self.model == "product_scalar":
            if self.lambda_values is None or len(self.lambda_values) == 0:
                raise ConfigurationError("product_scalar model needs lambda_values")
            if len(self.profiles) != 1:
                raise ConfigurationError("product_scalar model uses exactly one profile")
            if any(v <= 0 for v in self.lambda_values):
                raise ConfigurationError("lambda values must be positive")
            if self.switching_rate <= 0:
                raise ConfigurationError("switching_rate must be positive")
            p = self.profiles[0]
            for v in self.lambda_values:
                self._check_band(v * p.lower_bound(), v * p.upper_bound())
        else:
            if len(self.profiles) != 1:
                raise ConfigurationError("constant_in_time model uses exactly one profile")
            p = self.profiles[0]
            self._check_band(p.lower_bound(), p.upper_bound())

    def _check_band(self, lo: float, hi: float):
        if lo < self.alpha_lo - 1e-12 or hi > self.alpha_hi + 1e-12:
            raise ConfigurationError(
                f"profile range [{lo:.6g}, {hi:.6g}] escapes the rate band "
                f"[{self.alpha_lo:.6g}, {self.alpha_hi:.6g}]"
            )

    @property
    def dim(self) -> int:
        return self.profiles[0].dim

    @property
    def lambda_mean(self) -> float:
        """Stationary mean of the scalar modulation (uniform over values)."""
        if self.model != "product_scalar":
            raise ConfigurationError("lambda_mean only defined for product_scalar")
        return float(np.mean(self.lambda_values))

    def rng(self, seed_offset: int = 0) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(seed_offset,))
        )

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "profiles": [p.to_dict() for p in self.profiles],
            "alpha_lo": self.alpha_lo,
            "alpha_hi": self.alpha_hi,
            "seed": self.seed,
            "switching_rate": self.switching_rate,
            "lambda_values": list(self.lambda_values) if self.lambda_values else None,
        }

    @staticmethod
    def from_dict(data: dict) -> "EnvironmentSpec":
        return EnvironmentSpec(
            model=data["model"],
            profiles=tuple(PeriodicProfile.from_dict(p) for p in data["profiles"]),
            alpha_lo=float(data["alpha_lo"]),
            alpha_hi=float(data["alpha_hi"]),
            seed=int(data["seed"]),
            switching_rate=float(data.get("switching_rate", 1.0)),
            lambda_values=(
                tuple(float(v) for v in data["lambda_values"])
                if data.get("lambda_values")
                else None
            ),
        )


@dataclass(frozen=True)
class EnvironmentPath:
    """One realization of the environment on a finite horizon [t0, t1].

    Piecewise-constant description: ``jump_times`` are strictly increasing
    interior switch times; ``states`` has one more entry and holds the
    active profile index (markov model) or the index into
    ``lambda_values`` (product model).
    """

    spec: EnvironmentSpec
    t0: float
    t1: float
    jump_times: np.ndarray
    states: np.ndarray
    seed_offset: int = 0

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        if jt.size and not np.all(np.diff(jt) > 0):
            raise ConfigurationError("jump times must be strictly increasing")
        if jt.size and (jt[0] <= self.t0 or jt[-1] >= self.t1):
            raise ConfigurationError("jump times must lie strictly inside the horizon")
        if len(self.states) != jt.size + 1:
            raise ConfigurationError("need exactly one state per segment")

    @property
    def horizon(self) -> tuple:
        return (self.t0, self.t1)

    def _require_inside(self, t: float):
        if t < self.t0 - 1e-12 or t > self.t1 + 1e-12:
            raise DomainError(
                f"time {t} outside environment horizon [{self.t0}, {self.t1}]"
            )

    def state_at(self, t: float) -> int:
        self._require_inside(t)
        k = int(np.searchsorted(self.jump_times, t, side="right"))
        return int(self.states[k])

    def segments(self, a: float, b: float):
        """Yield (start, end, state) covering [a, b] with constant state."""
        self._require_inside(a)
        self._require_inside(b)
        if not a < b:
            raise DomainError("need a < b for segment iteration")
        lo = int(np.searchsorted(self.jump_times, a, side="right"))
        hi = int(np.searchsorted(self.jump_times, b, side="left"))
        edges = [a] + [float(t) for t in self.jump_times[lo:hi]] + [b]
        for k in range(len(edges) - 1):
            yield edges[k], edges[k + 1], int(self.states[lo + k])

    def scale_at(self, t: float) -> float:
        """Scalar multiplier of the base generator at time t (1 unless product)."""
        if self.spec.model == "product_scalar":
            return float(self.spec.lambda_values[self.state_at(t)])
        return 1.0

    def profile_at(self, t: float) -> PeriodicProfile:
        if self.spec.model == "markov_switching":
            return self.spec.profiles[self.state_at(t)]
        return self.spec.profiles[0]

    def mu(self, xi: np.ndarray, eta: np.ndarray, t: float) -> np.ndarray:
        """Rate field value(s) at (xi, eta, t); periodic in xi and eta."""
        prof = self.profile_at(t)
        return self.scale_at(t) * prof(xi, eta)

    def lambda_path(self):
        """(jump_times, values) of the scalar modulation; product model only."""
        if self.spec.model != "product_scalar":
            raise ConfigurationError("lambda path only defined for product_scalar")
        vals = np.asarray(self.spec.lambda_values, dtype=float)[self.states]
        return self.jump_times.copy(), vals

    def shifted(self, s: float) -> "EnvironmentPath":
        """Time-shifted view: shifted(s) evaluated at t equals self at t + s."""
        return EnvironmentPath(
            spec=self.spec,
            t0=self.t0 - s,
            t1=self.t1 - s,
            jump_times=self.jump_times - s,
            states=self.states.copy(),
            seed_offset=self.seed_offset,
        )

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "t0": self.t0,
            "t1": self.t1,
            "jump_times": [float(t) for t in self.jump_times],
            "states": [int(s) for s in self.states],
            "seed_offset": self.seed_offset,
        }

    @staticmethod
    def from_dict(data: dict) -> "EnvironmentPath":
        return EnvironmentPath(
            spec=EnvironmentSpec.from_dict(data["spec"]),
            t0=float(data["t0"]),
            t1=float(data["t1"]),
            jump_times=np.asarray(data["jump_times"], dtype=float),
            states=np.asarray(data["states"], dtype=int),
            seed_offset=int(data.get("seed_offset", 0)),
        )


def sample_environment(
    spec: EnvironmentSpec, horizon, seed_offset: int = 0
) -> EnvironmentPath:
    """Draw one environment realization on the given (t0, t1) horizon.

    The switching chain starts from its stationary uniform law and jump
    times are a homogeneous Poisson stream started at t0, so the marginal
    law of the path does not depend on the time origin.  The same
    (spec.seed, seed_offset) pair always reproduces the same path, and a
    longer horizon with the same seeds extends the same jump stream.
    """
    t0, t1 = float(horizon[0]), float(horizon[1])
    if not t0 < t1:
        raise ConfigurationError("horizon must be a nonempty interval")
    rng = spec.rng(seed_offset)
    if spec.model == "constant_in_time":
        return EnvironmentPath(
            spec=spec,
            t0=t0,
            t1=t1,
            jump_times=np.empty(0),
            states=np.zeros(1, dtype=int),
            seed_offset=seed_offset,
        )
    n_choices = (
        len(spec.profiles)
        if spec.model == "markov_switching"
        else len(spec.lambda_values)
    )
    first = int(rng.integers(0, n_choices))
    jumps = []
    states = [first]
    t = t0
    mean_gap = 1.0 / spec.switching_rate
    while True:
        # draw waiting times in blocks to keep the prefix stable under
        # horizon extension while avoiding a per-jump python loop
        block = rng.exponential(mean_gap, size=64)
        picks = rng.integers(0, n_choices, size=64)
        stop = False
        for gap, pick in zip(block, picks):
            t += gap
            if t >= t1:
                stop = True
                break
            jumps.append(t)
            states.append(int(pick))
        if stop:
            break
    return EnvironmentPath(
        spec=spec,
        t0=t0,
        t1=t1,
        jump_times=np.asarray(jumps),
        states=np.asarray(states, dtype=int),
        seed_offset=seed_offset,
    )


def evaluate_mu(path: EnvironmentPath, xi, eta, t: float):
    """Rate field value at (xi, eta, t); raises DomainError outside the horizon."""
    return path.mu(np.asarray(xi, dtype=float), np.asarray(eta, dtype=float), t)


def sample_lambda(spec: EnvironmentSpec, horizon, seed_offset: int = 0):
    """Sample the scalar modulation path; returns (path, jump_times, values)."""
    if spec.model != "product_scalar":
        raise ConfigurationError("sample_lambda requires the product_scalar model")
    path = sample_environment(spec, horizon, seed_offset)
    times, vals = path.lambda_path()
    return path, times, vals


def lambda_time_average(path: EnvironmentPath) -> float:
    """Exact time average of lambda over the path horizon."""
    times, vals = path.lambda_path()
    edges = np.concatenate([[path.t0], times, [path.t1]])
    durations = np.diff(edges)
    return float(np.sum(durations * vals) / (path.t1 - path.t0))


def occupation_fractions(path: EnvironmentPath) -> np.ndarray:
    """Fraction of horizon time spent in each state."""
    n_states = (
        len(path.spec.profiles)
        if path.spec.model == "markov_switching"
        else (len(path.spec.lambda_values) if path.spec.lambda_values else 1)
    )
    edges = np.concatenate([[path.t0], path.jump_times, [path.t1]])
    durations = np.diff(edges)
    out = np.zeros(n_states)
    np.add.at(out, path.states, durations)
    return out / (path.t1 - path.t0)

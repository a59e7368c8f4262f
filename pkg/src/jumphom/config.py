"""Experiment configuration: a small versioned YAML dialect.

A config file is a nested mapping with the sections

    config_version: 1
    kind: cell | effective | eps_sweep | clt | product_case | full_pipeline
    seed: <master seed>
    kernel: {family, dim, width, center}
    environment: {model, alpha_lo, alpha_hi, switching_rate, profiles,
                  lambda_values}
    numerics: {n, dt_factor, sample_dt, doubling_tol, tail_tolerance,
               relax_density, relax_corrector, method}
    <kind>: ...               # per-experiment parameters, see DEFAULTS

Profiles are given explicitly (``kind: constant`` / ``kind: trig``) or as
``kind: random`` recipes expanded deterministically from the master seed,
so a config plus a seed pins every number in the run.  ``validate``
returns a list of human-readable diagnostics with config key paths and
never runs anything.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .environment import (
    EnvironmentSpec,
    PeriodicProfile,
    constant_profile,
    random_profile,
    trig_profile,
)
from .cell import CellOptions
from .epsilon import EpsProblem, GaussianBump
from .errors import ConfigurationError
from .kernels import DispersalKernel

CONFIG_VERSION = 1
KINDS = ("cell", "effective", "eps_sweep", "clt", "product_case", "full_pipeline")

DEFAULTS = {
    "numerics": {
        "n": 64,
        "dt_factor": 0.25,
        "sample_dt": 0.25,
        "doubling_tol": 1.0e-8,
        "tail_tolerance": 1.0e-12,
        "relax_density": None,
        "relax_corrector": None,
        "method": "rk4",
        "residual_stencils": 8,
    },
    "cell": {"window": [0.0, 20.0], "seed_offset": 0, "downsample": 1},
    "effective": {
        "drift_horizon": 400.0,
        "theta_horizon": 100.0,
        "cov_horizon": 1000.0,
        "replicas": 4,
        "cov_replicas": 8,
        "with_sigma": True,
    },
    "eps_sweep": {
        "epsilons": [0.2, 0.1, 0.05],
        "box_length": 2.0,
        "points_per_cell": 16,
        "u0": {"center": [1.0], "width": 0.05, "amplitude": 1.0},
        "final_time": 0.5,
        "n_sample_times": 11,
        "seed_offset": 0,
        "boundary_tol": 1.0e-3,
        "dt_factor": 0.25,
    },
    "clt": {
        "epsilon": 0.05,
        "t_max": 1.0,
        "replicas": 2000,
        "t_points": 5,
        "kurtosis_tol": 0.3,
        "drift_horizon": 400.0,
        "drift_replicas": 4,
        "cov_horizon": 1500.0,
        "cov_replicas": 8,
        "law_check": {"enabled": False, "epsilons": [0.2, 0.1], "replicas": 100,
                      "functionals": [{"kind": "point", "x": [1.0]}]},
    },
    "product_case": {
        "epsilons": [0.2, 0.1, 0.05],
        "box_length": 1.0,
        "points_per_cell": 8,
        "u0": {"center": [0.5], "width": 0.03, "amplitude": 1.0},
        "final_time": 0.5,
        "n_sample_times": 6,
        "seed_offset": 0,
        "dt_factor": 0.25,
    },
}


@dataclass
class ExperimentConfig:
    """Parsed and normalized experiment description."""

    kind: str
    name: str
    seed: int
    raw: dict

    # ---- construction -----------------------------------------------------

    @staticmethod
    def load(path, seed_override: Optional[int] = None) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise IOError(f"cannot read config file {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: config must be a mapping")
        return ExperimentConfig.from_dict(
            data, default_name=path.stem, seed_override=seed_override
        )

    @staticmethod
    def from_dict(
        data: dict, default_name: str = "experiment", seed_override: Optional[int] = None
    ) -> "ExperimentConfig":
        data = copy.deepcopy(data)
        version = data.get("config_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigurationError(
                f"config_version: expected {CONFIG_VERSION}, got {version}"
            )
        kind = data.get("kind")
        if kind not in KINDS:
            raise ConfigurationError(f"kind: must be one of {KINDS}, got {kind!r}")
        if seed_override is not None:
            data["seed"] = int(seed_override)
        if "seed" not in data:
            raise ConfigurationError("seed: a master seed is required")
        # fill defaults section by section
        merged = {"config_version": CONFIG_VERSION, "kind": kind, "seed": int(data["seed"])}
        merged["kernel"] = data.get("kernel", {})
        merged["environment"] = data.get("environment", {})
        merged["numerics"] = {**DEFAULTS["numerics"], **data.get("numerics", {})}
        sections = ["effective", "eps_sweep", "clt"] if kind == "full_pipeline" else [kind]
        for sec in sections:
            merged[sec] = _merge(DEFAULTS[sec], data.get(sec, {}))
        name = data.get("name", default_name)
        return ExperimentConfig(kind=kind, name=str(name), seed=int(data["seed"]), raw=merged)

    # ---- derived objects ----------------------------------------------------

    def kernel(self) -> DispersalKernel:
        k = self.raw.get("kernel", {})
        dim = int(k.get("dim", 1))
        return DispersalKernel(
            family=k.get("family", "gaussian"),
            dim=dim,
            width=float(k.get("width", 0.2)),
            center=tuple(float(c) for c in k.get("center", [0.0] * dim)),
        )

    def environment(self) -> EnvironmentSpec:
        e = self.raw.get("environment", {})
        model = e.get("model", "constant_in_time")
        alpha_lo = float(e.get("alpha_lo", 0.5))
        alpha_hi = float(e.get("alpha_hi", 1.5))
        dim = int(self.raw.get("kernel", {}).get("dim", 1))
        profiles = []
        for idx, pr in enumerate(e.get("profiles", [{"kind": "constant", "value": 1.0}])):
            profiles.append(self._build_profile(pr, idx, alpha_lo, alpha_hi, dim))
        lam = e.get("lambda_values")
        return EnvironmentSpec(
            model=model,
            profiles=tuple(profiles),
            alpha_lo=alpha_lo,
            alpha_hi=alpha_hi,
            seed=self.seed,
            switching_rate=float(e.get("switching_rate", 1.0)),
            lambda_values=tuple(float(v) for v in lam) if lam else None,
        )

    def _build_profile(self, pr: dict, idx: int, alpha_lo, alpha_hi, dim) -> PeriodicProfile:
        kind = pr.get("kind", "constant")
        if kind == "constant":
            return constant_profile(float(pr.get("value", 1.0)), dim=dim)
        if kind == "trig":
            comps = [
                (
                    float(t["amplitude"]),
                    float(t.get("phase", 0.0)),
                    tuple(int(v) for v in t["k_xi"]),
                    tuple(int(v) for v in t["k_eta"]),
                )
                for t in pr.get("terms", [])
            ]
            return trig_profile(dim, float(pr.get("offset", 1.0)), comps)
        if kind == "random":
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=self.seed, spawn_key=(777, idx))
            )
            band = pr.get("band")
            lo, hi = (float(band[0]), float(band[1])) if band else (alpha_lo, alpha_hi)
            return random_profile(
                rng,
                lo,
                hi,
                dim=dim,
                n_terms=int(pr.get("n_terms", 3)),
                max_mode=int(pr.get("max_mode", 2)),
                symmetric=bool(pr.get("symmetric", False)),
            )
        raise ConfigurationError(f"environment.profiles[{idx}].kind: unknown kind {kind!r}")

    def cell_options(self) -> CellOptions:
        n = self.raw["numerics"]
        return CellOptions(
            n=int(n["n"]),
            dt_factor=float(n["dt_factor"]),
            sample_dt=float(n["sample_dt"]),
            doubling_tol=float(n["doubling_tol"]),
            tail_tolerance=float(n["tail_tolerance"]),
            relax_density=_opt_float(n["relax_density"]),
            relax_corrector=_opt_float(n["relax_corrector"]),
            method=str(n["method"]),
            residual_stencils=int(n["residual_stencils"]),
        )

    def eps_problem(self, section: str, epsilon: float) -> EpsProblem:
        s = self.raw[section]
        L = float(s["box_length"])
        cells = L / float(epsilon)
        n_x = int(round(cells)) * int(s["points_per_cell"])
        return EpsProblem(
            kernel=self.kernel(),
            env_spec=self.environment(),
            epsilon=float(epsilon),
            box_length=L,
            n_x=n_x,
            u0=GaussianBump.from_dict(s["u0"]),
            final_time=float(s["final_time"]),
            n_sample_times=int(s["n_sample_times"]),
            dt_factor=float(s.get("dt_factor", self.raw["numerics"]["dt_factor"])),
            tail_tolerance=float(self.raw["numerics"]["tail_tolerance"]),
        )

    # ---- validation -----------------------------------------------------

    def validate(self) -> list:
        """Cross-field diagnostics without running anything."""
        issues = []
        try:
            kernel = self.kernel()
        except ConfigurationError as exc:
            issues.append(f"kernel: {exc}")
            kernel = None
        try:
            env = self.environment()
        except ConfigurationError as exc:
            issues.append(f"environment: {exc}")
            env = None
        n = self.raw["numerics"]
        for key in ("doubling_tol", "tail_tolerance", "sample_dt"):
            if float(n[key]) <= 0:
                issues.append(f"numerics.{key}: must be positive, got {n[key]}")
        if not (0 < float(n["dt_factor"]) <= 1.0):
            issues.append(
                f"numerics.dt_factor: must be in (0, 1] of the stability cap, got "
                f"{n['dt_factor']} (cap is 0.1/(2*alpha_hi))"
            )
        if n["method"] not in ("rk4", "exact"):
            issues.append(f"numerics.method: must be rk4 or exact, got {n['method']!r}")
        if kernel and env and kernel.dim != env.dim:
            issues.append("kernel.dim and environment profiles dimension differ")
        for section in ("eps_sweep", "product_case"):
            if section not in self.raw:
                continue
            s = self.raw[section]
            eps_list = [float(e) for e in s["epsilons"]]
            if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
                issues.append(f"{section}.epsilons: must be strictly decreasing")
            for eps in eps_list:
                ratio = float(s["box_length"]) / eps
                if abs(ratio - round(ratio)) > 1e-9:
                    issues.append(
                        f"{section}.epsilons: box_length/epsilon = {ratio:.6g} "
                        f"at epsilon={eps} is not a whole number of cells"
                    )
            if int(s["points_per_cell"]) < 8:
                issues.append(
                    f"{section}.points_per_cell: grid must resolve >= 8 points per "
                    f"cell, got {s['points_per_cell']}"
                )
            if kernel and env and not issues:
                try:
                    for eps in eps_list:
                        problem = self.eps_problem(section, eps)
                        issues.extend(
                            f"{section}: {msg}" for msg in problem.validate()
                        )
                except ConfigurationError as exc:
                    issues.append(f"{section}: {exc}")
        if "product_case" in self.raw and env is not None:
            if env.model != "product_scalar":
                issues.append(
                    "product_case: environment.model must be product_scalar"
                )
        if "clt" in self.raw:
            c = self.raw["clt"]
            if int(c["replicas"]) < 100:
                issues.append("clt.replicas: need at least 100 replicas")
            if float(c["epsilon"]) <= 0 or float(c["t_max"]) <= 0:
                issues.append("clt.epsilon and clt.t_max must be positive")
        if "cell" in self.raw:
            w = self.raw["cell"]["window"]
            if not (len(w) == 2 and float(w[0]) < float(w[1])):
                issues.append("cell.window: must be [start, end] with start < end")
        return issues

    # ---- serialization -----------------------------------------------------

    def normalized(self) -> dict:
        return copy.deepcopy(self.raw)

    def sha256(self) -> str:
        blob = json.dumps(self.normalized(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _merge(defaults: dict, override: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _opt_float(v):
    return None if v is None else float(v)

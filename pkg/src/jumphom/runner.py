"""Experiment drivers: run a parsed config and persist its artifacts.

Every run writes, under ``<output>/<name>/``:

* ``manifest.json``: the normalized config, its hash, the master seed and
  library versions (everything needed to reproduce every number);
* ``summary.json``: the structured results of the experiment;
* flat CSV detail files per experiment kind.

Artifacts carry no timestamps and all reductions happen in replica order,
so rerunning the same config and seed yields byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
import scipy

from . import __version__ as package_version
from .cell import (
    CellOptions,
    EffectiveModel,
    compute_b,
    compute_effective_model,
    compute_sigma_sq,
    solve_cell,
)
from .config import ExperimentConfig
from .environment import sample_environment
from .epsilon import (
    EpsProblem,
    build_frame,
    micro_environment,
    moving_frame_error,
    product_case_check,
    solve_eps,
    solve_homogenized,
    weighted_energy,
)
from .errors import ConfigurationError
from .evolution import AssembledEnvironment
from .kernels import periodize
from .cell import _relax_window
from .stochastics import clt_check, law_limit_check, sample_G0_paths


def run_experiment(config: ExperimentConfig, out_root) -> Path:
    """Run the configured experiment; returns the artifact directory."""
    issues = config.validate()
    if issues:
        raise ConfigurationError("; ".join(issues))
    out_dir = Path(out_root) / config.name
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.kind == "cell":
        summary = _run_cell(config, out_dir)
    elif config.kind == "effective":
        summary = _run_effective(config, out_dir)
    elif config.kind == "eps_sweep":
        summary = _run_eps_sweep(config, out_dir)
    elif config.kind == "clt":
        summary = _run_clt(config, out_dir)
    elif config.kind == "product_case":
        summary = _run_product(config, out_dir)
    elif config.kind == "full_pipeline":
        summary = {"kind": "full_pipeline"}
        summary["effective"] = _run_effective(config, out_dir)
        summary["eps_sweep"] = _run_eps_sweep(
            config, out_dir, effective=summary["effective"]
        )
        summary["clt"] = _run_clt(config, out_dir, effective=summary["effective"])
    else:
        raise ConfigurationError(f"unknown kind {config.kind}")
    _write_json(out_dir / "manifest.json", _manifest(config))
    _write_json(out_dir / "summary.json", summary)
    return out_dir


def _manifest(config: ExperimentConfig) -> dict:
    return {
        "config": config.normalized(),
        "config_sha256": config.sha256(),
        "seed": config.seed,
        "name": config.name,
        "versions": {
            "jumphom": package_version,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "config_dialect": 1,
        },
    }


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------


def _run_cell(config: ExperimentConfig, out_dir: Path) -> dict:
    section = config.raw["cell"]
    sol = solve_cell(
        config.kernel(),
        config.environment(),
        tuple(float(w) for w in section["window"]),
        options=config.cell_options(),
        seed_offset=int(section["seed_offset"]),
    )
    d = sol.dim
    header = (
        ["time"]
        + [f"beta_{i}" for i in range(d)]
        + [f"theta_{i}{j}" for i in range(d) for j in range(d)]
        + ["p_min", "p_max"]
    )
    rows = []
    for k, t in enumerate(sol.times):
        rows.append(
            [f"{t:.10g}"]
            + [f"{v:.12g}" for v in sol.beta[k]]
            + [f"{v:.12g}" for v in sol.theta_inst[k].ravel()]
            + [f"{sol.p_inf[k].min():.12g}", f"{sol.p_inf[k].max():.12g}"]
        )
    _write_csv(out_dir / "cell_trajectory.csv", header, rows)
    return {
        "kind": "cell",
        "solution": sol.to_dict(downsample=int(section["downsample"])),
    }


def _run_effective(config: ExperimentConfig, out_dir: Path) -> dict:
    s = config.raw["effective"]
    model = compute_effective_model(
        config.kernel(),
        config.environment(),
        drift_horizon=float(s["drift_horizon"]),
        theta_horizon=float(s["theta_horizon"]),
        cov_horizon=float(s["cov_horizon"]),
        replicas=int(s["replicas"]),
        cov_replicas=int(s["cov_replicas"]),
        options=config.cell_options(),
        with_sigma=bool(s["with_sigma"]),
    )
    _write_json(out_dir / "effective_model.json", model.to_dict())
    return {"kind": "effective", "model": model.to_dict()}


def _run_eps_sweep(config: ExperimentConfig, out_dir: Path, effective=None) -> dict:
    s = config.raw["eps_sweep"]
    kernel = config.kernel()
    spec = config.environment()
    options = config.cell_options()
    if effective is None:
        eff_cfg = config.raw.get("effective")
        if eff_cfg is None:
            from .config import DEFAULTS

            eff_cfg = DEFAULTS["effective"]
        model = compute_effective_model(
            kernel,
            spec,
            drift_horizon=float(eff_cfg["drift_horizon"]),
            theta_horizon=float(eff_cfg["theta_horizon"]),
            cov_horizon=float(eff_cfg["cov_horizon"]),
            replicas=int(eff_cfg["replicas"]),
            cov_replicas=int(eff_cfg["cov_replicas"]),
            options=options,
            with_sigma=False,
        )
        model_dict = model.to_dict()
    else:
        model = EffectiveModel.from_dict(effective["model"])
        model_dict = effective["model"]
    seed_offset = int(s["seed_offset"])
    boundary_tol = float(s["boundary_tol"])
    rows = []
    per_eps = []
    for eps in [float(e) for e in s["epsilons"]]:
        problem = config.eps_problem("eps_sweep", eps)
        npc = problem.points_per_cell
        cell_opts = CellOptions(
            n=npc,
            dt_factor=options.dt_factor,
            sample_dt=problem.micro_horizon() / (problem.n_sample_times - 1),
            doubling_tol=options.doubling_tol,
            tail_tolerance=options.tail_tolerance,
            relax_density=options.relax_density,
            relax_corrector=options.relax_corrector,
            with_kappa2=False,
            verify_relaxation=False,
        )
        # one realization drives both the scaled run and its cell problems
        probe = AssembledEnvironment(
            periodize(kernel, npc, options.tail_tolerance),
            sample_environment(spec, (-1.0, 1.0), seed_offset),
            with_transport=True,
        )
        relax = options.relax_density or _relax_window(probe, options.doubling_tol, options)
        cell_opts.relax_density = relax
        cell_opts.relax_corrector = relax
        path = micro_environment(problem, seed_offset, extra_horizon=2.0 * relax + 2.0)
        sol = solve_eps(problem, seed_offset=seed_offset, path=path)
        cell_sol = solve_cell(
            kernel,
            spec,
            (0.0, problem.micro_horizon()),
            options=cell_opts,
            seed_offset=seed_offset,
            path=path,
        )
        frame = build_frame(eps, sol.times, model.b, cell_sol)
        u0_vals = problem.u0(sol.grid.points())
        hom = solve_homogenized(u0_vals, model.theta, sol.grid, sol.times)
        err = moving_frame_error(sol.trajectory(), hom, frame, boundary_tol=boundary_tol)
        energy = weighted_energy(sol, cell_sol)
        for k, t in enumerate(sol.times):
            rows.append(
                [
                    f"{eps:.10g}",
                    str(config.seed),
                    f"{t:.10g}",
                    f"{err['errors'][k]:.12g}",
                    f"{float(np.linalg.norm(err['shifts'][k])):.12g}",
                    f"{float(np.linalg.norm(frame.fluctuation_part[k])):.12g}",
                ]
            )
        per_eps.append(
            {
                "epsilon": eps,
                "sup_error": err["sup_error"],
                "boundary_level_max": float(np.max(err["boundary_levels"])),
                "weighted_energy_start": float(energy[0]),
                "weighted_energy_end": float(energy[-1]),
                "weighted_energy_monotone": bool(
                    np.all(np.diff(energy) <= 1e-10 * energy[0])
                ),
            }
        )
    _write_csv(
        out_dir / "eps_sweep_errors.csv",
        ["epsilon", "seed", "t", "error", "shift", "delta"],
        rows,
    )
    sups = [p["sup_error"] for p in per_eps]
    ratios = [sups[i + 1] / sups[i] for i in range(len(sups) - 1)]
    return {
        "kind": "eps_sweep",
        "model": model_dict,
        "per_epsilon": per_eps,
        "sup_errors": sups,
        "ratios": ratios,
        "strictly_decreasing": bool(all(r < 1.0 for r in ratios)),
    }


def _run_clt(config: ExperimentConfig, out_dir: Path, effective=None) -> dict:
    s = config.raw["clt"]
    kernel = config.kernel()
    spec = config.environment()
    options = config.cell_options()
    if effective is not None and effective["model"].get("sigma_sq") is not None:
        model = EffectiveModel.from_dict(effective["model"])
        b, sigma_sq, sigma_se = model.b, model.sigma_sq, np.asarray(model.sigma_sq_se)
    else:
        b, _ = compute_b(
            kernel,
            spec,
            horizon=float(s["drift_horizon"]),
            replicas=int(s["drift_replicas"]),
            options=options,
        )
        sig = compute_sigma_sq(
            kernel,
            spec,
            horizon=float(s["cov_horizon"]),
            replicas=int(s["cov_replicas"]),
            options=options,
        )
        sigma_sq = 0.5 * (sig["sigma_sq"] + sig["sigma_sq"].T)
        sigma_se = sig["se"]
    eps = float(s["epsilon"])
    t_grid = np.linspace(0.0, float(s["t_max"]), int(s["t_points"]))
    t_grid, paths = sample_G0_paths(
        kernel,
        spec,
        epsilon=eps,
        t_max=float(s["t_max"]),
        replicas=int(s["replicas"]),
        b=b,
        t_grid=t_grid,
        options=options,
    )
    report = clt_check(
        t_grid,
        paths,
        sigma_sq,
        eps,
        sigma_sq_se=sigma_se,
        kurtosis_tol=float(s["kurtosis_tol"]),
    )
    d = paths.shape[2]
    rows = [
        [f"{t_grid[k]:.10g}"]
        + [f"{report.empirical_cov[k, i, j]:.12g}" for i in range(d) for j in range(d)]
        + [f"{report.target_cov[k, i, j]:.12g}" for i in range(d) for j in range(d)]
        for k in range(t_grid.size)
    ]
    _write_csv(
        out_dir / "clt_covariance.csv",
        ["t"]
        + [f"emp_{i}{j}" for i in range(d) for j in range(d)]
        + [f"target_{i}{j}" for i in range(d) for j in range(d)],
        rows,
    )
    _write_csv(
        out_dir / "g0_final_samples.csv",
        [f"g0_{i}" for i in range(d)],
        [[f"{v:.12g}" for v in row] for row in paths[:, -1, :]],
    )
    summary = {
        "kind": "clt",
        "b": np.asarray(b).tolist(),
        "sigma_sq": np.asarray(sigma_sq).tolist(),
        "sigma_sq_se": np.asarray(sigma_se).tolist(),
        "report": report.to_dict(),
    }
    law = s.get("law_check", {})
    if law.get("enabled"):
        if effective is None or "eps_sweep" not in config.raw:
            raise ConfigurationError(
                "clt.law_check needs the full_pipeline kind (an effective model "
                "and an eps_sweep geometry)"
            )
        model = EffectiveModel.from_dict(effective["model"])
        model.sigma_sq = np.atleast_2d(sigma_sq)
        model.sigma_sq_se = np.atleast_2d(np.asarray(sigma_se))
        base = config.eps_problem("eps_sweep", float(law["epsilons"][0]))
        summary["law_check"] = law_limit_check(
            base,
            [float(e) for e in law["epsilons"]],
            model,
            law["functionals"],
            replicas=int(law["replicas"]),
        )
    return summary


def _run_product(config: ExperimentConfig, out_dir: Path) -> dict:
    s = config.raw["product_case"]
    seed_offset = int(s["seed_offset"])
    rows = []
    per_eps = []
    for eps in [float(e) for e in s["epsilons"]]:
        problem = config.eps_problem("product_case", eps)
        res = product_case_check(problem, seed_offset=seed_offset)
        for k, t in enumerate(res["times"]):
            rows.append(
                [
                    f"{eps:.10g}",
                    str(config.seed),
                    f"{t:.10g}",
                    f"{res['mismatch'][k]:.12g}",
                    f"{res['delta'][k]:.12g}",
                ]
            )
        per_eps.append(
            {
                "epsilon": eps,
                "max_mismatch": res["max_mismatch"],
                "final_abs_delta": float(abs(res["delta"][-1])),
                "max_abs_delta": res["max_abs_delta"],
            }
        )
    _write_csv(
        out_dir / "product_case.csv",
        ["epsilon", "seed", "t", "mismatch", "delta"],
        rows,
    )
    deltas = [p["final_abs_delta"] for p in per_eps]
    return {
        "kind": "product_case",
        "per_epsilon": per_eps,
        "max_mismatch": max(p["max_mismatch"] for p in per_eps),
        "delta_decreasing": bool(
            all(deltas[i + 1] < deltas[i] for i in range(len(deltas) - 1))
        ),
    }

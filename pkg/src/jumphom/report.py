"""Post-hoc report rendering from a run's artifact directory.

Reads ``summary.json`` and the CSV detail files written by the runner and
produces a flat ``report.csv`` of headline numbers plus PNG figures next
to it.  Purely a viewer: it never recomputes anything, so it can be
re-run on any artifact directory.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def render_report(run_dir) -> list:
    """Render report.csv and figures for one run directory.

    Returns the list of files written.
    """
    run_dir = Path(run_dir)
    summary_path = run_dir / "summary.json"
    if not summary_path.exists():
        raise IOError(f"no summary.json in {run_dir}")
    summary = json.loads(summary_path.read_text())
    written = []
    rows = [("name", "value")]
    rows.extend(_headline_rows(summary, prefix=""))
    report_csv = run_dir / "report.csv"
    with open(report_csv, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    written.append(report_csv)
    written.extend(_figures(summary, run_dir))
    return written


def _headline_rows(summary: dict, prefix: str) -> list:
    rows = []
    kind = summary.get("kind")
    if kind == "full_pipeline":
        for sec in ("effective", "eps_sweep", "clt"):
            if sec in summary:
                rows.extend(_headline_rows(summary[sec], prefix=f"{sec}."))
        return rows
    if kind == "effective":
        model = summary["model"]
        for i, v in enumerate(model["b"]):
            rows.append((f"{prefix}b[{i}]", v))
            rows.append((f"{prefix}b_se[{i}]", model["b_se"][i]))
        theta = np.asarray(model["theta"])
        for i in range(theta.shape[0]):
            for j in range(theta.shape[1]):
                rows.append((f"{prefix}theta[{i}][{j}]", theta[i, j]))
        if model.get("sigma_sq") is not None:
            sig = np.asarray(model["sigma_sq"])
            for i in range(sig.shape[0]):
                for j in range(sig.shape[1]):
                    rows.append((f"{prefix}sigma_sq[{i}][{j}]", sig[i, j]))
    elif kind == "eps_sweep":
        for p in summary["per_epsilon"]:
            rows.append((f"{prefix}sup_error[eps={p['epsilon']}]", p["sup_error"]))
        for i, r in enumerate(summary["ratios"]):
            rows.append((f"{prefix}ratio[{i}]", r))
        rows.append((f"{prefix}strictly_decreasing", summary["strictly_decreasing"]))
    elif kind == "clt":
        rep = summary["report"]
        rows.append((f"{prefix}replicas", rep["replicas"]))
        rows.append((f"{prefix}epsilon", rep["epsilon"]))
        emp = np.asarray(rep["empirical_cov"])[-1]
        tgt = np.asarray(rep["target_cov"])[-1]
        for i in range(emp.shape[0]):
            rows.append((f"{prefix}var_final[{i}]", emp[i, i]))
            rows.append((f"{prefix}target_final[{i}]", tgt[i, i]))
        for name, ok in rep["checks"].items():
            rows.append((f"{prefix}check.{name}", ok))
    elif kind == "product_case":
        rows.append((f"{prefix}max_mismatch", summary["max_mismatch"]))
        rows.append((f"{prefix}delta_decreasing", summary["delta_decreasing"]))
        for p in summary["per_epsilon"]:
            rows.append(
                (f"{prefix}final_abs_delta[eps={p['epsilon']}]", p["final_abs_delta"])
            )
    elif kind == "cell":
        diag = summary["solution"]["diagnostics"]
        for key in sorted(diag):
            rows.append((f"{prefix}diag.{key}", diag[key]))
    return rows


def _figures(summary: dict, run_dir: Path) -> list:
    written = []
    kind = summary.get("kind")
    if kind == "full_pipeline":
        for sec in ("effective", "eps_sweep", "clt"):
            if sec in summary:
                written.extend(_figures(summary[sec], run_dir))
        return written
    if kind == "eps_sweep" and (run_dir / "eps_sweep_errors.csv").exists():
        data = _read_csv(run_dir / "eps_sweep_errors.csv")
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
        eps_vals = sorted(set(data["epsilon"]), reverse=True)
        for eps in eps_vals:
            mask = data["epsilon"] == eps
            ax1.semilogy(data["t"][mask], np.maximum(data["error"][mask], 1e-18),
                         marker="o", ms=3, label=f"eps={eps:g}")
        ax1.set_xlabel("t")
        ax1.set_ylabel("moving-frame L2 error")
        ax1.legend(fontsize=8)
        sups = [s["sup_error"] for s in summary["per_epsilon"]]
        ax2.loglog([s["epsilon"] for s in summary["per_epsilon"]], sups, "o-")
        ax2.set_xlabel("eps")
        ax2.set_ylabel("sup error")
        ax2.invert_xaxis()
        fig.tight_layout()
        out = run_dir / "eps_sweep_errors.png"
        fig.savefig(out, dpi=150)
        plt.close(fig)
        written.append(out)
    if kind == "clt":
        rep = summary["report"]
        t = np.asarray(rep["times"])
        emp = np.asarray(rep["empirical_cov"])
        tgt = np.asarray(rep["target_cov"])
        se = np.asarray(rep["cov_se"])
        d = emp.shape[1]
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
        for i in range(d):
            axes[0].errorbar(t, emp[:, i, i], yerr=3 * se[:, i, i], fmt="o",
                             ms=3, label=f"empirical var[{i}]")
            axes[0].plot(t, tgt[:, i, i], "-", label=f"sigma_sq[{i}{i}] t")
        axes[0].set_xlabel("t")
        axes[0].set_ylabel("Var G0(t)")
        axes[0].legend(fontsize=8)
        samples_file = run_dir / "g0_final_samples.csv"
        if samples_file.exists():
            data = _read_csv(samples_file)
            col = data[list(data)[0]]
            axes[1].hist(col, bins=40, density=True, alpha=0.7)
            sd = col.std()
            if sd > 0:
                xs = np.linspace(col.min(), col.max(), 200)
                axes[1].plot(
                    xs,
                    np.exp(-0.5 * ((xs - col.mean()) / sd) ** 2)
                    / (sd * np.sqrt(2 * np.pi)),
                    "k-",
                )
            axes[1].set_xlabel("G0 at final time")
        fig.tight_layout()
        out = run_dir / "clt_report.png"
        fig.savefig(out, dpi=150)
        plt.close(fig)
        written.append(out)
    if kind == "product_case" and (run_dir / "product_case.csv").exists():
        data = _read_csv(run_dir / "product_case.csv")
        fig, ax = plt.subplots(figsize=(4.8, 3.4))
        for eps in sorted(set(data["epsilon"]), reverse=True):
            mask = data["epsilon"] == eps
            ax.plot(data["t"][mask], data["delta"][mask], "o-", ms=3, label=f"eps={eps:g}")
        ax.set_xlabel("t")
        ax.set_ylabel("clock drift delta(t)")
        ax.legend(fontsize=8)
        fig.tight_layout()
        out = run_dir / "product_case.png"
        fig.savefig(out, dpi=150)
        plt.close(fig)
        written.append(out)
    if kind == "cell" and (run_dir / "cell_trajectory.csv").exists():
        data = _read_csv(run_dir / "cell_trajectory.csv")
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        beta_cols = [c for c in data if c.startswith("beta_")]
        theta_cols = [c for c in data if c.startswith("theta_")]
        for c in beta_cols:
            ax.plot(data["time"], data[c], label=c)
        for c in theta_cols:
            ax.plot(data["time"], data[c], "--", label=c)
        ax.set_xlabel("s")
        ax.legend(fontsize=8)
        fig.tight_layout()
        out = run_dir / "cell_trajectory.png"
        fig.savefig(out, dpi=150)
        plt.close(fig)
        written.append(out)
    return written


def _read_csv(path: Path) -> dict:
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = {h: [] for h in header}
        for row in reader:
            for h, v in zip(header, row):
                cols[h].append(float(v))
    return {h: np.asarray(v) for h, v in cols.items()}

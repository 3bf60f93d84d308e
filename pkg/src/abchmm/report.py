"""Figure rendering for run folders.

Every report path writes PNG figures next to the delimited output it
visualizes; the CSVs stay the authoritative record.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .replication import CurveFit, ReplicationSummary

_BAND_COLORS = {"outer": "#c6dbef", "inner": "#6baed6"}


def render_estimation_summary(summary: ReplicationSummary, truth, out_dir) -> list[Path]:
    """Median trace with 25-75% and 5-95% bands, one panel per coordinate."""
    out_dir = Path(out_dir)
    d = len(summary.names)
    fig, axes = plt.subplots(1, d, figsize=(4.0 * d, 3.2), squeeze=False)
    for j, name in enumerate(summary.names):
        ax = axes[0, j]
        if summary.band5 is not None:
            ax.fill_between(summary.index, summary.band5[:, j], summary.band95[:, j],
                            color=_BAND_COLORS["outer"], label="5-95%")
            ax.fill_between(summary.index, summary.band25[:, j], summary.band75[:, j],
                            color=_BAND_COLORS["inner"], label="25-75%")
        ax.plot(summary.index, summary.median[:, j], color="#08306b", lw=1.2, label="median")
        if truth is not None:
            ax.axhline(float(truth[j]), color="green", ls=":", lw=1.0, label="truth")
        ax.set_xlabel("step")
        ax.set_title(name)
        if j == 0:
            ax.legend(fontsize=7, loc="best")
    fig.tight_layout()
    path = out_dir / "estimates.png"
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return [path]


def render_sweep_report(sweep_values, terminals_by_value, names, truth, out_dir,
                        sweep_label: str, fits: dict[str, CurveFit] | None = None) -> list[Path]:
    """Boxplots of terminal estimates plus bias/std points per sweep value."""
    out_dir = Path(out_dir)
    paths = []
    d = len(names)
    fig, axes = plt.subplots(1, d, figsize=(4.0 * d, 3.2), squeeze=False)
    for j, name in enumerate(names):
        ax = axes[0, j]
        data = [np.asarray(term)[:, j] for term in terminals_by_value]
        ax.boxplot(data, tick_labels=[str(v) for v in sweep_values])
        if truth is not None:
            ax.axhline(float(truth[j]), color="green", ls=":", lw=1.0)
        ax.set_xlabel(sweep_label)
        ax.set_title(name)
    fig.tight_layout()
    box_path = out_dir / "terminal_boxplots.png"
    fig.savefig(box_path, dpi=130)
    plt.close(fig)
    paths.append(box_path)

    if truth is not None:
        fig, axes = plt.subplots(1, d, figsize=(4.0 * d, 3.2), squeeze=False)
        xs = np.asarray(sweep_values, dtype=float)
        for j, name in enumerate(names):
            ax = axes[0, j]
            bias = [abs(np.mean(np.asarray(t)[:, j]) - truth[j]) for t in terminals_by_value]
            std = [np.std(np.asarray(t)[:, j], ddof=1) for t in terminals_by_value]
            ax.plot(xs, bias, "ro", label="|bias|")
            ax.plot(xs, std, "bs", label="std")
            if fits:
                grid = np.linspace(xs.min(), xs.max(), 200)
                for label, fit in fits.items():
                    if label.startswith(name):
                        ax.plot(grid, fit.predict(grid), lw=0.9,
                                color="red" if "bias" in label else "blue")
            ax.set_xlabel(sweep_label)
            ax.set_title(name)
            if j == 0:
                ax.legend(fontsize=7)
        fig.tight_layout()
        bv_path = out_dir / "bias_std.png"
        fig.savefig(bv_path, dpi=130)
        plt.close(fig)
        paths.append(bv_path)
    return paths


def render_bias_sweeps(sweep_csv, out_dir) -> list[Path]:
    """Ratio and TV curves versus n, one line per epsilon."""
    out_dir = Path(out_dir)
    rows = []
    with open(sweep_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = [(r["quantity"], int(r["n"]), float(r["epsilon"]), float(r["value"]),
                 float(r["ratio"])) for r in reader]
    quantities = sorted({r[0] for r in rows})
    fig, axes = plt.subplots(1, len(quantities), figsize=(4.2 * len(quantities), 3.2),
                             squeeze=False)
    for ax, quantity in zip(axes[0], quantities):
        eps_values = sorted({r[2] for r in rows if r[0] == quantity})
        for eps in eps_values:
            pts = sorted((r[1], r[3]) for r in rows if r[0] == quantity and r[2] == eps)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", ms=3,
                    label=f"eps={eps:g}")
        ax.set_xlabel("n")
        ax.set_yscale("log")
        ax.set_title(quantity)
        ax.legend(fontsize=7)
    fig.tight_layout()
    path = out_dir / "bias_sweeps.png"
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return [path]

"""Replication studies: percentile bands across independent runs, curve fits.

Each run draws its randomness from a substream named by the run index, so
results do not depend on execution order or worker count.  Percentiles follow
the nearest-rank rule.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

C_OVER_SQRT = "c/sqrt(t)"
A_T_PLUS_B_OVER_T = "a*t+b/t"
C_OVER_T = "c/t"
CURVE_FAMILIES = (C_OVER_SQRT, A_T_PLUS_B_OVER_T, C_OVER_T)


def nearest_rank(sorted_values: np.ndarray, pct: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * R)-th smallest value."""
    r = sorted_values.size
    if r == 0:
        raise ValueError("need at least one value")
    rank = max(1, math.ceil(pct / 100.0 * r))
    return float(sorted_values[min(rank, r) - 1])


def percentile_bands(values: np.ndarray, pcts=(5, 25, 50, 75, 95)) -> dict[int, np.ndarray]:
    """Columnwise nearest-rank percentiles of a (runs, index) array."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[None, :]
    ordered = np.sort(values, axis=0)
    r = ordered.shape[0]
    out = {}
    for p in pcts:
        rank = max(1, math.ceil(p / 100.0 * r))
        out[p] = ordered[min(rank, r) - 1].copy()
    return out


@dataclass
class ReplicationSummary:
    """Per-index medians and bands across runs plus terminal statistics."""

    names: tuple[str, ...]
    index: np.ndarray                      # iteration or time axis
    median: np.ndarray                     # (len(index), d)
    band25: np.ndarray | None              # lower/upper pairs, None when runs < 2
    band75: np.ndarray | None
    band5: np.ndarray | None
    band95: np.ndarray | None
    terminal_mean: np.ndarray
    terminal_std: np.ndarray | None
    terminal_abs_bias: np.ndarray | None   # vs truth when known
    completed: int
    requested: int

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["index"]
            for name in self.names:
                header.append(f"{name}_median")
                if self.band25 is not None:
                    header += [f"{name}_p5", f"{name}_p25", f"{name}_p75", f"{name}_p95"]
            header.append("completed")
            writer.writerow(header)
            fmt = lambda v: format(float(v), ".17g")
            for i, idx in enumerate(self.index):
                row = [int(idx)]
                for j in range(len(self.names)):
                    row.append(fmt(self.median[i, j]))
                    if self.band25 is not None:
                        row += [fmt(self.band5[i, j]), fmt(self.band25[i, j]),
                                fmt(self.band75[i, j]), fmt(self.band95[i, j])]
                row.append(self.completed)
                writer.writerow(row)


def summarize_traces(traces: Sequence[np.ndarray], names: tuple[str, ...],
                     truth: np.ndarray | None = None, requested: int | None = None,
                     stride: int = 1) -> ReplicationSummary:
    """Pointwise percentile summary of per-run trace arrays (steps, d)."""
    if not traces:
        raise ValueError("no completed runs to summarize")
    stack = np.stack([np.asarray(t, dtype=float) for t in traces])  # (R, steps, d)
    r, steps, d = stack.shape
    index = np.arange(0, steps, stride)
    sub = stack[:, index, :]
    median = np.empty((index.size, d))
    bands = {p: np.empty((index.size, d)) for p in (5, 25, 75, 95)}
    for j in range(d):
        pct = percentile_bands(sub[:, :, j])
        median[:, j] = pct[50]
        for p in (5, 25, 75, 95):
            bands[p][:, j] = pct[p]
    terminal = stack[:, -1, :]
    terminal_mean = terminal.mean(axis=0)
    terminal_std = terminal.std(axis=0, ddof=1) if r >= 2 else None
    terminal_abs_bias = np.abs(terminal_mean - truth) if truth is not None else None
    return ReplicationSummary(
        names=names, index=index, median=median,
        band25=bands[25] if r >= 2 else None, band75=bands[75] if r >= 2 else None,
        band5=bands[5] if r >= 2 else None, band95=bands[95] if r >= 2 else None,
        terminal_mean=terminal_mean, terminal_std=terminal_std,
        terminal_abs_bias=terminal_abs_bias,
        completed=r, requested=requested if requested is not None else r,
    )


@dataclass(frozen=True)
class CurveFit:
    family: str
    coefficients: dict
    rms_residual: float

    def predict(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        c = self.coefficients
        if self.family == C_OVER_SQRT:
            return c["c"] / np.sqrt(t)
        if self.family == C_OVER_T:
            return c["c"] / t
        return c["a"] * t + c["b"] / t


def fit_curve(t: np.ndarray, v: np.ndarray, family: str) -> CurveFit:
    """Least-squares fit of one of the three report curve families.

    All three are linear in their coefficients, so the fits are closed-form
    and deterministic.
    """
    t = np.asarray(t, dtype=float).reshape(-1)
    v = np.asarray(v, dtype=float).reshape(-1)
    if t.size != v.size:
        raise ValueError("t and v must have equal length")
    if np.any(t <= 0):
        raise ValueError("curve families require t > 0")
    if family == C_OVER_SQRT:
        if t.size < 1:
            raise ValueError("need at least one point")
        basis = 1.0 / np.sqrt(t)
        c = float((v * basis).sum() / (basis**2).sum())
        resid = v - c * basis
        coef = {"c": c}
    elif family == C_OVER_T:
        if t.size < 1:
            raise ValueError("need at least one point")
        basis = 1.0 / t
        c = float((v * basis).sum() / (basis**2).sum())
        resid = v - c * basis
        coef = {"c": c}
    elif family == A_T_PLUS_B_OVER_T:
        if t.size < 2:
            raise ValueError("two-parameter family needs at least two points")
        if np.allclose(t, t[0]):
            raise ValueError("degenerate design: all t equal")
        design = np.column_stack([t, 1.0 / t])
        sol, *_ = np.linalg.lstsq(design, v, rcond=None)
        resid = v - design @ sol
        coef = {"a": float(sol[0]), "b": float(sol[1])}
    else:
        raise ValueError(f"unknown curve family {family!r}; choose from {CURVE_FAMILIES}")
    rms = float(np.sqrt(np.mean(resid**2)))
    return CurveFit(family, coef, rms)


def write_fits_csv(path, fits: Sequence[tuple[str, CurveFit]]) -> None:
    """Rows of (label, family, coefficient name, value, rms_residual)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "family", "coefficient", "value", "rms_residual"])
        for label, fit in fits:
            for cname, cval in fit.coefficients.items():
                writer.writerow([label, fit.family, cname, format(cval, ".17g"),
                                 format(fit.rms_residual, ".17g")])

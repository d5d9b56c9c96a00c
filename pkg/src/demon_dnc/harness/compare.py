"""Cross-run comparison: per-variant mean and std by step, plus MI/error rank correlation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .trainer import load_run

METRICS = ("task_loss", "error", "eval_error", "mi_estimate")


def rankdata(x: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Spearman rank correlation; NaN when undefined (n < 2 or a constant side)."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("spearman needs equal-length inputs")
    if len(x) < 2:
        return float("nan")
    rx, ry = rankdata(x), rankdata(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    den = math.sqrt(float((rx * rx).sum() * (ry * ry).sum()))
    if den == 0.0:
        return float("nan")
    return float((rx * ry).sum() / den)


@dataclass
class Comparison:
    variants: list
    steps: list
    columns: list
    rows: list                      # one list of floats per common step
    final: list = field(default_factory=list)   # (dir, variant, seed, final_error, final_mi)
    correlation: float = float("nan")
    correlation_n: int = 0

    def to_text(self) -> str:
        def fmt(v):
            return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6g}"

        lines = ["\t".join(["step"] + self.columns)]
        for step, row in zip(self.steps, self.rows):
            lines.append("\t".join([str(step)] + [fmt(v) for v in row]))
        lines.append("")
        lines.append("\t".join(["run", "variant", "seed", "final_error", "final_mi_estimate"]))
        for d, var, seed, err, mi in self.final:
            lines.append("\t".join([d, var, str(seed), fmt(err), fmt(mi)]))
        lines.append("")
        lines.append(f"spearman_final_mi_vs_error\t{fmt(self.correlation)}\tn={self.correlation_n}")
        return "\n".join(lines) + "\n"


def _final_error(records: list, summary: dict | None) -> float:
    if summary is not None and summary.get("eval_error_mean") is not None:
        return float(summary["eval_error_mean"])
    for rec in reversed(records):
        if rec.get("eval_error") is not None:
            return float(rec["eval_error"])
    return float(records[-1]["error"]) if records else float("nan")


def _final_mi(records: list) -> float:
    for rec in reversed(records):
        if rec.get("mi_estimate") is not None:
            return float(rec["mi_estimate"])
    return float("nan")


def compare(run_dirs, metrics=METRICS) -> Comparison:
    run_dirs = [str(d) for d in run_dirs]
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least 2 run directories")
    runs = []
    for d in run_dirs:
        cfg, records, summary = load_run(d)
        if not records:
            raise ValueError(f"{d}: no metrics records")
        runs.append((d, cfg, {r["step"]: r for r in records}, records, summary))

    common = sorted(set.intersection(*(set(r[2]) for r in runs)))
    variants = sorted({cfg.variant for _, cfg, *_ in runs})
    columns = []
    for var in variants:
        for m in metrics:
            columns += [f"{var}:{m}:mean", f"{var}:{m}:std"]
    rows = []
    for step in common:
        row = []
        for var in variants:
            group = [by_step[step] for _, cfg, by_step, *_ in runs if cfg.variant == var]
            for m in metrics:
                vals = np.array([g[m] for g in group if g.get(m) is not None], dtype=np.float64)
                if vals.size:
                    row += [float(vals.mean()), float(vals.std())]
                else:
                    row += [float("nan"), float("nan")]
        rows.append(row)

    final = []
    for d, cfg, _, records, summary in runs:
        final.append((d, cfg.variant, cfg.seed, _final_error(records, summary), _final_mi(records)))
    pts = [(mi, err) for _, _, _, err, mi in final if math.isfinite(mi) and math.isfinite(err)]
    corr = spearman([p[0] for p in pts], [p[1] for p in pts]) if len(pts) >= 2 else float("nan")
    return Comparison(variants, common, columns, rows, final, corr, len(pts))

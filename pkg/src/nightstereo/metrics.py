"""Depth metrics with plain (pixel-pooled) and depth-binned aggregation.

The binned ("weighted") form averages per-bin means so sparsely populated
far ranges count as much as the dense near field. Squared-error metrics are
aggregated in squared space and rooted last.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffmath.ops import interp_matrix

METRICS = ("abs_rel", "sq_rel", "rmse", "log_rmse", "a1", "a2", "a3")
ROOTED = frozenset({"rmse", "log_rmse"})
LABELS = {"abs_rel": "AbsRel", "sq_rel": "SqRel", "rmse": "RMSE", "log_rmse": "LogRMSE",
          "a1": "d<1.25", "a2": "d<1.25^2", "a3": "d<1.25^3"}
DEFAULT_MAX_DEPTH = 50.0
DEFAULT_BINS = 10


@dataclass
class GroundTruthDepth:
    values: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.valid is None:
            self.valid = self.values > 0
        self.valid = np.asarray(self.valid, dtype=bool) & (self.values > 0)


@dataclass
class PixelTerms:
    """Pre-root per-pixel terms for every valid pixel, plus the matching gt depths."""
    terms: dict[str, np.ndarray]
    gt: np.ndarray

    @property
    def count(self) -> int:
        return int(self.gt.size)


@dataclass
class MetricReport:
    unweighted: dict[str, float]
    weighted: dict[str, float]
    bin_means: dict[str, np.ndarray]     # pre-root, NaN for empty bins
    bin_counts: np.ndarray
    total: int                           # Z
    bins: int                            # M
    bin_width: float
    max_depth: float
    empty: bool = False
    notes: dict[str, str] = field(default_factory=dict)

    @property
    def bin_edges(self) -> np.ndarray:
        return np.linspace(0.0, self.max_depth, self.bins + 1)

    def consistency_gap(self) -> float:
        """Largest |unweighted − Σ (N_i/Z)·binmean_i| over metrics, in pre-root space."""
        if self.empty:
            return 0.0
        gap = 0.0
        w = self.bin_counts / self.total
        for m in METRICS:
            u = self.unweighted[m] ** 2 if m in ROOTED else self.unweighted[m]
            means = np.nan_to_num(self.bin_means[m])
            gap = max(gap, abs(u - float((w * means).sum())))
        return gap


def resample_to(pred: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling of a 2-D map onto another grid."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape == tuple(shape):
        return pred
    return interp_matrix(shape[0], pred.shape[0]) @ pred @ interp_matrix(shape[1], pred.shape[1]).T


def per_pixel_metrics(pred, gt: GroundTruthDepth, max_depth: float = DEFAULT_MAX_DEPTH,
                      pred_valid: np.ndarray | None = None) -> PixelTerms | None:
    """Per-pixel error terms; ``None`` marks an image without any valid pixel."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != gt.values.shape:
        if pred_valid is not None:
            pred_valid = resample_to(pred_valid.astype(np.float64), gt.values.shape) > 0.5
        pred = resample_to(pred, gt.values.shape)
    ok = gt.valid & (gt.values <= max_depth) & (pred > 0) & np.isfinite(pred)
    if pred_valid is not None:
        ok &= pred_valid
    if not ok.any():
        return None
    p, g = pred[ok], gt.values[ok]
    ratio = np.maximum(p / g, g / p)
    terms = {
        "abs_rel": np.abs(p - g) / g,
        "sq_rel": (p - g) ** 2 / g,
        "rmse": (p - g) ** 2,
        "log_rmse": (np.log(p) - np.log(g)) ** 2,
        "a1": (ratio < 1.25).astype(np.float64),
        "a2": (ratio < 1.25 ** 2).astype(np.float64),
        "a3": (ratio < 1.25 ** 3).astype(np.float64),
    }
    return PixelTerms(terms, g)


def _finalize(values: dict[str, float]) -> dict[str, float]:
    return {m: float(np.sqrt(v)) if m in ROOTED else float(v) for m, v in values.items()}


def aggregate_unweighted(terms: PixelTerms | None) -> dict[str, float] | None:
    if terms is None or terms.count == 0:
        return None
    return _finalize({m: float(np.mean(terms.terms[m])) for m in METRICS})


def bin_index(depth: np.ndarray, bins: int, max_depth: float) -> np.ndarray:
    """Bin ``i`` covers ``(i·w, (i+1)·w]`` with ``w = max_depth / bins``."""
    width = max_depth / bins
    return np.clip(np.ceil(np.asarray(depth) / width).astype(int) - 1, 0, bins - 1)


def depth_histogram(gt, bins: int = DEFAULT_BINS, max_depth: float = DEFAULT_MAX_DEPTH) -> np.ndarray:
    """Counts of valid depths (0, max_depth] per uniform bin."""
    if isinstance(gt, GroundTruthDepth):
        vals = gt.values[gt.valid]
    else:
        vals = np.asarray(gt, dtype=np.float64).ravel()
        vals = vals[vals > 0]
    vals = vals[vals <= max_depth]
    return np.bincount(bin_index(vals, bins, max_depth), minlength=bins)


def aggregate_weighted(terms: PixelTerms | None, bins: int = DEFAULT_BINS,
                       max_depth: float = DEFAULT_MAX_DEPTH):
    """Binned aggregation: mean over non-empty bins of per-bin means.

    Returns ``(values, bin_means, bin_counts)`` or ``None`` when every bin is empty.
    """
    if bins < 1:
        raise ValueError("need at least one bin")
    if terms is None or terms.count == 0:
        return None
    idx = bin_index(terms.gt, bins, max_depth)
    counts = np.bincount(idx, minlength=bins)
    filled = counts > 0
    bin_means, values = {}, {}
    for m in METRICS:
        sums = np.bincount(idx, weights=terms.terms[m], minlength=bins)
        means = np.full(bins, np.nan)
        means[filled] = sums[filled] / counts[filled]
        bin_means[m] = means
        values[m] = float(means[filled].mean())
    return _finalize(values), bin_means, counts


def evaluate_depth(pred, gt: GroundTruthDepth, bins: int = DEFAULT_BINS, max_depth: float = DEFAULT_MAX_DEPTH,
                   pred_valid: np.ndarray | None = None) -> MetricReport:
    terms = per_pixel_metrics(pred, gt, max_depth, pred_valid)
    if terms is None:
        return empty_report(bins, max_depth)
    weighted, bin_means, counts = aggregate_weighted(terms, bins, max_depth)
    return MetricReport(aggregate_unweighted(terms), weighted, bin_means, counts, terms.count,
                        bins, max_depth / bins, max_depth)


def empty_report(bins: int = DEFAULT_BINS, max_depth: float = DEFAULT_MAX_DEPTH) -> MetricReport:
    nan = {m: float("nan") for m in METRICS}
    return MetricReport(nan, dict(nan), {m: np.full(bins, np.nan) for m in METRICS},
                        np.zeros(bins, dtype=int), 0, bins, max_depth / bins, max_depth, empty=True)


def combine_reports(reports: list[MetricReport]) -> MetricReport:
    """Average per-image U and W values across images; per-bin tables are pooled by count."""
    live = [r for r in reports if not r.empty]
    if not live:
        return reports[0] if reports else empty_report()
    first = live[0]
    u = {m: float(np.mean([r.unweighted[m] for r in live])) for m in METRICS}
    w = {m: float(np.mean([r.weighted[m] for r in live])) for m in METRICS}
    counts = np.sum([r.bin_counts for r in live], axis=0)
    bin_means = {}
    for m in METRICS:
        sums = np.sum([np.nan_to_num(r.bin_means[m]) * r.bin_counts for r in live], axis=0)
        means = np.full(first.bins, np.nan)
        means[counts > 0] = sums[counts > 0] / counts[counts > 0]
        bin_means[m] = means
    notes = {"aggregation": "per-image metrics averaged across images", "images": str(len(live)),
             "skipped_empty": str(len(reports) - len(live))}
    return MetricReport(u, w, bin_means, counts, int(counts.sum()), first.bins, first.bin_width,
                        first.max_depth, notes=notes)


def report_rows(report: MetricReport) -> list[list[str]]:
    """Tab-separable rows: header, one row per metric × {U, W}, then per-bin rows."""
    rows = [["kind", "metric", "value", "bin_lo", "bin_hi", "count"]]
    for kind, vals in (("U", report.unweighted), ("W", report.weighted)):
        for m in METRICS:
            rows.append([kind, LABELS[m], f"{vals[m]:.6f}", "", "", str(report.total)])
    edges = report.bin_edges
    for i in range(report.bins):
        for m in METRICS:
            v = report.bin_means[m][i]
            if m in ROOTED and np.isfinite(v):
                v = np.sqrt(v)
            rows.append(["bin", LABELS[m], f"{v:.6f}", f"{edges[i]:g}", f"{edges[i + 1]:g}",
                         str(int(report.bin_counts[i]))])
    return rows


def format_report(report: MetricReport) -> str:
    lines = [f"# {k}: {v}" for k, v in sorted(report.notes.items())]
    lines += ["\t".join(r) for r in report_rows(report)]
    return "\n".join(lines) + "\n"


def write_bins_csv(report: MetricReport, path) -> None:
    """Per-bin curves: one row per bin with every metric as a column."""
    edges = report.bin_edges
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"] + [LABELS[m] for m in METRICS])
        for i in range(report.bins):
            vals = []
            for m in METRICS:
                v = report.bin_means[m][i]
                vals.append(f"{np.sqrt(v) if m in ROOTED and np.isfinite(v) else v:.6f}")
            writer.writerow([f"{edges[i]:g}", f"{edges[i + 1]:g}", int(report.bin_counts[i])] + vals)

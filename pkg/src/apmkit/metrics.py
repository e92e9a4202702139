"""Evaluation metrics for positive/negative/unlabeled site prediction.

Ranking metrics (AUROC, the area under the lift curve) are computed from
midranks in O(N log N), so massive score pools stay cheap and ties are
handled exactly. Confusion metrics run over labeled pixels only, which is
what presence-only evaluation calls for. Reliability is summarised over
six equal-width probability bins, and surfaces can be reduced to a
100-bin density with a Gaussian-smoothed curve for export.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .raster.grid import RasterGrid

SCHEMA_VERSION = 1

N_RELIABILITY_BINS = 6
N_DENSITY_BINS = 100

# Radar axes, fixed order and spacing.
RADAR_AXES = ("accuracy", "auroc", "f1", "dice", "iou")


@dataclass(frozen=True)
class ScoredSample:
    """One evaluation point: a score, an optional label, optional finds."""

    score: float
    label: str | None = None
    find_count: int | None = None

    def __post_init__(self) -> None:
        if self.label not in (None, "positive", "negative"):
            raise DataError(f"label must be positive/negative/None, got {self.label!r}")
        if not math.isfinite(self.score):
            raise DataError(f"score must be finite, got {self.score}")


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged (midrank convention)."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    sv = v[order]
    n = v.size
    starts = np.flatnonzero(np.r_[True, sv[1:] != sv[:-1]])
    stops = np.r_[starts[1:], n]
    avg = 0.5 * (starts + stops - 1) + 1.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(avg, stops - starts)
    return ranks


def auroc(samples: Sequence[ScoredSample]) -> float:
    """Area under the ROC curve by the rank-sum formulation.

    Ties contribute half via midranks, matching pair counting with 0.5
    credit for equal scores.

    Raises:
        DataError: when either class is absent, naming the missing one.
    """
    scores = np.array([s.score for s in samples], dtype=np.float64)
    labels = np.array([s.label for s in samples], dtype=object)
    pos = scores[labels == "positive"]
    neg = scores[labels == "negative"]
    if pos.size == 0:
        raise DataError("AUROC undefined: no positive samples")
    if neg.size == 0:
        raise DataError("AUROC undefined: no negative samples")
    ranks = _midranks(np.concatenate([pos, neg]))
    rank_sum = float(ranks[: pos.size].sum())
    u = rank_sum - pos.size * (pos.size + 1) / 2.0
    return u / (pos.size * neg.size)


def auroc_from_arrays(scores: np.ndarray, positive: np.ndarray) -> float:
    """AUROC from parallel arrays (``positive`` boolean)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    samples = [
        ScoredSample(float(s), "positive" if p else "negative")
        for s, p in zip(scores, positive)
    ]
    return auroc(samples)


def aul(scores: np.ndarray, labeled: np.ndarray) -> float:
    """Area under the lift curve for a positives-vs-pool ranking.

    ``scores`` is the full pool (labeled positives included); ``labeled``
    flags the known positives. Computed from midranks over the pool:
    every (labeled, pool) pair contributes 1, 0.5 or 0 as the labeled
    score ranks above, with, or below the pool score.

    Raises:
        DataError: when no sample is labeled.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labeled = np.asarray(labeled, dtype=bool)
    if scores.shape != labeled.shape or scores.ndim != 1:
        raise DataError("scores and labeled must be parallel 1-D arrays")
    n_pos = int(labeled.sum())
    if n_pos == 0:
        raise DataError("AUL undefined: empty positive set")
    ranks = _midranks(scores)
    return float((ranks[labeled] - 0.5).sum()) / (n_pos * scores.size)


def aul_identity(auroc_value: float, prior: float) -> float:
    """AUL implied by an AUROC and the class prior: ``0.5 a + (1 - a) AUROC``."""
    if not 0.0 <= prior <= 1.0:
        raise DataError(f"prior must be in [0, 1], got {prior}")
    return 0.5 * prior + (1.0 - prior) * float(auroc_value)


# --- confusion metrics -------------------------------------------------------


@dataclass(frozen=True)
class ConfusionMetrics:
    """Threshold metrics over labeled pixels."""

    tp: int
    fp: int
    fn: int
    tn: int
    dice: float
    iou: float
    f1: float
    accuracy: float


def confusion_from_counts(tp: int, fp: int, fn: int, tn: int) -> ConfusionMetrics:
    """Derive the metric set from a confusion table.

    With no positives anywhere (tp = fp = fn = 0) the overlap ratios are
    defined as 1: nothing was missed and nothing was hallucinated.
    """
    if min(tp, fp, fn, tn) < 0:
        raise DataError("confusion counts must be non-negative")
    total = tp + fp + fn + tn
    if total == 0:
        raise DataError("empty confusion table")
    denom = 2 * tp + fp + fn
    dice = (2.0 * tp / denom) if denom else 1.0
    union = tp + fp + fn
    iou = (tp / union) if union else 1.0
    accuracy = (tp + tn) / total
    return ConfusionMetrics(tp, fp, fn, tn, dice, iou, dice, accuracy)


def confusion_metrics(pred, labels, threshold: float = 0.5) -> ConfusionMetrics:
    """Confusion metrics of a score field against a {1, 0, nodata} raster.

    Unlabeled (nodata) pixels never enter the counts. Scores at or above
    ``threshold`` predict positive.
    """
    if isinstance(pred, RasterGrid):
        p_values, p_valid = pred.band(0).astype(np.float64), ~pred.nodata_mask
    else:
        p_values = np.asarray(pred, dtype=np.float64)
        p_valid = np.isfinite(p_values)
    if isinstance(labels, RasterGrid):
        l_values, l_valid = labels.band(0).astype(np.float64), ~labels.nodata_mask
    else:
        l_values = np.asarray(labels, dtype=np.float64)
        l_valid = np.isfinite(l_values)
    if p_values.shape != l_values.shape:
        raise DataError(
            f"prediction {p_values.shape} and labels {l_values.shape} shapes differ"
        )
    keep = p_valid & l_valid
    if not keep.any():
        raise DataError("no labeled pixels to evaluate")
    truth = l_values[keep] >= 0.5
    called = p_values[keep] >= threshold
    tp = int(np.sum(truth & called))
    fp = int(np.sum(~truth & called))
    fn = int(np.sum(truth & ~called))
    tn = int(np.sum(~truth & ~called))
    return confusion_from_counts(tp, fp, fn, tn)


# --- reliability bins --------------------------------------------------------


@dataclass(frozen=True)
class BinStats:
    """One probability interval of the reliability analysis.

    Empty bins keep ``count == 0`` and None statistics; they are reported
    as empty, never as zeros.
    """

    lo: float
    hi: float
    count: int
    mean_score: float | None
    positive_ratio: float | None
    calibration_gap: float | None


def bin_analysis(
    samples: Sequence[ScoredSample], n_bins: int = N_RELIABILITY_BINS
) -> list[BinStats]:
    """Equal-width reliability bins over [0, 1].

    Bins are [lo, hi) with the last closed; a score sitting exactly on an
    interior edge goes to the higher bin. Every sample must carry a
    positive/negative label. The calibration gap of a non-empty bin is
    ``|mean_score - positive_ratio|``.
    """
    if n_bins < 1:
        raise DataError(f"n_bins must be >= 1, got {n_bins}")
    counts = np.zeros(n_bins, dtype=np.int64)
    score_sums = np.zeros(n_bins, dtype=np.float64)
    pos_counts = np.zeros(n_bins, dtype=np.int64)
    for s in samples:
        if s.label is None:
            raise DataError("bin analysis requires labeled samples")
        if not 0.0 <= s.score <= 1.0:
            raise DataError(f"scores must lie in [0, 1], got {s.score}")
        idx = min(int(s.score * n_bins), n_bins - 1)
        counts[idx] += 1
        score_sums[idx] += s.score
        pos_counts[idx] += s.label == "positive"
    out = []
    for i in range(n_bins):
        lo, hi = i / n_bins, (i + 1) / n_bins
        if counts[i] == 0:
            out.append(BinStats(lo, hi, 0, None, None, None))
        else:
            mean_score = score_sums[i] / counts[i]
            ratio = pos_counts[i] / counts[i]
            out.append(
                BinStats(lo, hi, int(counts[i]), mean_score, ratio, abs(mean_score - ratio))
            )
    return out


# --- radar volume ------------------------------------------------------------


def radar_area(values: Sequence[float]) -> float:
    """Area of the radar polygon with axes at equal angles."""
    v = np.asarray(values, dtype=np.float64)
    if v.size != len(RADAR_AXES):
        raise DataError(f"radar polygon needs {len(RADAR_AXES)} values, got {v.size}")
    if (v < 0).any():
        raise DataError("radar values must be non-negative")
    angle = 2.0 * math.pi / v.size
    return float(0.5 * math.sin(angle) * np.sum(v * np.roll(v, -1)))


def _radar_values(report: Mapping | "MetricsReport") -> list[float]:
    if isinstance(report, MetricsReport):
        source = report.metric_dict()
    else:
        source = dict(report)
    try:
        return [float(source[name]) for name in RADAR_AXES]
    except KeyError as exc:
        raise DataError(f"report is missing radar metric {exc.args[0]!r}") from None


def volume_gain(report: Mapping | "MetricsReport", baseline: Mapping | "MetricsReport") -> float:
    """Relative radar-polygon area gain of ``report`` over ``baseline``.

    Axes are ordered accuracy, AUROC, F1, dice, IoU at equal angles; the
    gain is ``area(report) / area(baseline) - 1``. A doubling of every
    metric therefore reads as a gain of 3.

    Raises:
        DataError: when the baseline polygon has zero area.
    """
    area_r = radar_area(_radar_values(report))
    area_b = radar_area(_radar_values(baseline))
    if area_b == 0.0:
        raise DataError("baseline radar area is zero; gain undefined")
    return area_r / area_b - 1.0


# --- rank correlation --------------------------------------------------------


def find_count_correlation(samples: Sequence[ScoredSample]) -> float | None:
    """Spearman correlation between scores and find counts, ties midranked.

    Uses the samples that carry a find count. Returns None when either
    variable is constant (the coefficient is undefined there).

    Raises:
        DataError: with fewer than 3 usable samples.
    """
    pairs = [(s.score, s.find_count) for s in samples if s.find_count is not None]
    if len(pairs) < 3:
        raise DataError(
            f"need at least 3 samples with find counts, got {len(pairs)}"
        )
    scores = np.array([p[0] for p in pairs], dtype=np.float64)
    counts = np.array([p[1] for p in pairs], dtype=np.float64)
    rs = _midranks(scores)
    rc = _midranks(counts)
    rs -= rs.mean()
    rc -= rc.mean()
    denom = math.sqrt(float(np.sum(rs * rs)) * float(np.sum(rc * rc)))
    if denom == 0.0:
        return None
    return float(np.sum(rs * rc)) / denom


# --- densities ---------------------------------------------------------------


@dataclass(frozen=True)
class DensityCurve:
    """Histogram density plus a Gaussian-smoothed curve on bin centers."""

    bin_centers: np.ndarray
    histogram: np.ndarray
    smoothed: np.ndarray
    bandwidth: float


def probability_density(
    scores: np.ndarray, n_bins: int = N_DENSITY_BINS
) -> DensityCurve:
    """Score density over [0, 1]: histogram plus Gaussian-kernel curve.

    The kernel bandwidth follows the Silverman rule
    ``0.9 min(std, IQR / 1.34) n^(-1/5)`` with a small floor so constant
    scores stay well defined.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    s = s[np.isfinite(s)]
    if s.size == 0:
        raise DataError("no finite scores to bin")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    hist, _ = np.histogram(s, bins=edges)
    density = hist / (s.size * (1.0 / n_bins))
    std = float(s.std())
    q75, q25 = np.percentile(s, [75.0, 25.0])
    iqr = float(q75 - q25)
    spread = min(std, iqr / 1.34) if iqr > 0 else std
    bandwidth = max(0.9 * spread * s.size ** (-0.2), 1e-3)
    z = (centers[:, None] - s[None, :]) / bandwidth
    smoothed = np.exp(-0.5 * z * z).sum(axis=1) / (
        s.size * bandwidth * math.sqrt(2.0 * math.pi)
    )
    return DensityCurve(centers, density, smoothed, bandwidth)


def write_density_csv(path: str | os.PathLike, density: DensityCurve) -> None:
    """Write the density curve as CSV with a fixed three-column schema."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_center", "histogram_density", "smoothed_density"])
        for c, h, s in zip(density.bin_centers, density.histogram, density.smoothed):
            writer.writerow([f"{c:.10g}", f"{h:.10g}", f"{s:.10g}"])


def surface_density(surface: RasterGrid, n_bins: int = N_DENSITY_BINS) -> DensityCurve:
    """Density of a surface's unmasked scores."""
    values = surface.band(0)[~surface.nodata_mask]
    return probability_density(values, n_bins)


# --- report ------------------------------------------------------------------


@dataclass
class MetricsReport:
    """A full evaluation summary, serialisable to versioned JSON."""

    auroc: float | None = None
    aul: float | None = None
    dice: float | None = None
    iou: float | None = None
    f1: float | None = None
    accuracy: float | None = None
    bins: list[BinStats] = field(default_factory=list)
    density_histogram: list[float] = field(default_factory=list)
    find_count_rho: float | None = None
    volume_gain: float | None = None
    baseline_name: str | None = None
    metadata: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def metric_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "aul": self.aul,
            "dice": self.dice,
            "iou": self.iou,
            "f1": self.f1,
            "accuracy": self.accuracy,
        }

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "metrics": self.metric_dict(),
            "bins": [
                {
                    "lo": b.lo,
                    "hi": b.hi,
                    "count": b.count,
                    "mean_score": b.mean_score,
                    "positive_ratio": b.positive_ratio,
                    "calibration_gap": b.calibration_gap,
                }
                for b in self.bins
            ],
            "density_histogram": list(self.density_histogram),
            "find_count_rho": self.find_count_rho,
            "volume_gain": self.volume_gain,
            "baseline_name": self.baseline_name,
            "metadata": self.metadata,
        }

    @staticmethod
    def from_dict(doc: Mapping) -> "MetricsReport":
        metrics = doc.get("metrics", {})
        bins = [
            BinStats(
                b["lo"], b["hi"], b["count"], b.get("mean_score"),
                b.get("positive_ratio"), b.get("calibration_gap"),
            )
            for b in doc.get("bins", [])
        ]
        return MetricsReport(
            auroc=metrics.get("auroc"),
            aul=metrics.get("aul"),
            dice=metrics.get("dice"),
            iou=metrics.get("iou"),
            f1=metrics.get("f1"),
            accuracy=metrics.get("accuracy"),
            bins=bins,
            density_histogram=list(doc.get("density_histogram", [])),
            find_count_rho=doc.get("find_count_rho"),
            volume_gain=doc.get("volume_gain"),
            baseline_name=doc.get("baseline_name"),
            metadata=dict(doc.get("metadata", {})),
            schema_version=int(doc.get("schema_version", SCHEMA_VERSION)),
        )

"""Dataset characterization: counts, temporal histograms, NEG/POS ratio,
kNN sparsity and polarity coherence, plus dataset-level aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .convert import ConversionConfig, count_common_points, event_to_pc
from .event_io import NEG, POS, EventSequence
from .pc_model import EventPointCloud, NeighborIndex


class UndefinedRatioError(ZeroDivisionError):
    pass


class TooFewPointsError(ValueError):
    pass


def count_events(seq: EventSequence):
    n_pos = int((seq.p == POS).sum())
    return len(seq), n_pos, len(seq) - n_pos


def temporal_histogram(seq: EventSequence, n_bins: int = 100) -> dict:
    """Event counts per time bin, globally and per polarity."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    hist = {"all": np.zeros(n_bins, dtype=np.int64),
            "pos": np.zeros(n_bins, dtype=np.int64),
            "neg": np.zeros(n_bins, dtype=np.int64)}
    if len(seq) == 0:
        return hist
    t = seq.t
    t0 = int(t.min())
    span = int(t.max()) - t0 + 1
    b = ((t - t0) * n_bins) // span
    hist["all"] = np.bincount(b, minlength=n_bins)
    hist["pos"] = np.bincount(b[seq.p == POS], minlength=n_bins)
    hist["neg"] = np.bincount(b[seq.p == NEG], minlength=n_bins)
    return hist


def neg_pos_ratio(seq: EventSequence) -> float:
    _, n_pos, n_neg = count_events(seq)
    if n_pos == 0:
        raise UndefinedRatioError("NEG/POS ratio undefined without POS events")
    return n_neg / n_pos


def _coords(pc) -> np.ndarray:
    if isinstance(pc, EventPointCloud):
        return pc.points
    return np.asarray(pc).reshape(-1, 3)


def sparsity(pc, k: int = 20) -> float:
    """Median over points of the mean Euclidean distance to their k nearest neighbours."""
    pts = _coords(pc)
    if len(pts) < k + 1:
        raise TooFewPointsError(f"sparsity needs at least {k + 1} points, got {len(pts)}")
    index = NeighborIndex(pts)
    _, d2 = index.query_many(pts, k, self_indices=np.arange(len(pts)))
    return float(np.median(np.sqrt(d2).mean(axis=1)))


def polarity_coherence(points, polarities, k: int = 20, ns=None) -> dict:
    """Percentage of events with at least n same-polarity events among their k neighbours.

    Returns ``{n: percentage}`` for each requested n (default 1..k).
    """
    pts = np.asarray(points).reshape(-1, 3)
    pol = np.asarray(polarities).reshape(-1)
    if len(pts) < k + 1:
        raise TooFewPointsError(f"coherence needs at least {k + 1} points, got {len(pts)}")
    ns = list(range(1, k + 1)) if ns is None else list(ns)
    if any(not 1 <= n <= k for n in ns):
        raise ValueError("n must lie in [1, k]")
    index = NeighborIndex(pts)
    idx, _ = index.query_many(pts, k, self_indices=np.arange(len(pts)))
    same = (pol[idx] == pol[:, None]).sum(axis=1)
    return {n: 100.0 * float((same >= n).mean()) for n in ns}


@dataclass
class SequenceStats:
    source_id: Optional[str]
    label: Optional[str]
    n_total: int
    n_pos: int
    n_neg: int
    neg_pos_ratio: Optional[float]
    temporal_histogram: dict
    sparsity: dict  # {"global", "pos", "neg"} -> value or None
    coherence: dict  # n -> percentage
    n_cross_polarity_duplicates: int = 0
    n_voxels: int = 0

    @property
    def cross_duplicate_pct(self) -> float:
        return 100.0 * self.n_cross_polarity_duplicates / self.n_total if self.n_total else 0.0

    def row(self) -> dict:
        """Flat scalar view used for CSV output and aggregation."""
        r = {
            "source_id": self.source_id,
            "label": self.label,
            "n_total": self.n_total,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "neg_pos_ratio": self.neg_pos_ratio,
            "sparsity_global": self.sparsity.get("global"),
            "sparsity_pos": self.sparsity.get("pos"),
            "sparsity_neg": self.sparsity.get("neg"),
            "cross_duplicates": self.n_cross_polarity_duplicates,
            "cross_duplicate_pct": self.cross_duplicate_pct,
        }
        for n, v in sorted(self.coherence.items()):
            r[f"coherence_{n}"] = v
        return r


def characterize_sequence(seq: EventSequence, tsf: int = 256, k: int = 20, n_bins: int = 100) -> SequenceStats:
    """All per-sequence metrics; distance metrics use the voxelized, deduplicated clouds."""
    n_total, n_pos, n_neg = count_events(seq)
    try:
        ratio = neg_pos_ratio(seq)
    except UndefinedRatioError:
        ratio = None
    pos, neg, conv = event_to_pc(seq, ConversionConfig(tsf=tsf))
    # cross-polarity duplicates stay as two separate points in the merged cloud
    merged = np.concatenate([pos.points, neg.points])
    merged_pol = np.r_[np.full(len(pos), POS), np.full(len(neg), NEG)]

    def _safe(fn, *a):
        try:
            return fn(*a)
        except TooFewPointsError:
            return None

    sp = {"global": _safe(sparsity, merged, k), "pos": _safe(sparsity, pos, k),
          "neg": _safe(sparsity, neg, k)}
    coh = _safe(polarity_coherence, merged, merged_pol, k) or {}
    hist = temporal_histogram(seq, n_bins)
    # cross duplicates measured on the raw (x, y, t) coordinates
    raw_pos = np.stack([seq.x, seq.y, seq.t], axis=1)[seq.p == POS]
    raw_neg = np.stack([seq.x, seq.y, seq.t], axis=1)[seq.p == NEG]
    cross = count_common_points(np.unique(raw_pos, axis=0), np.unique(raw_neg, axis=0))
    return SequenceStats(seq.source_id, seq.label, n_total, n_pos, n_neg, ratio,
                         {k_: v.tolist() for k_, v in hist.items()}, sp, coh,
                         n_cross_polarity_duplicates=cross, n_voxels=len(merged))


@dataclass
class MetricSummary:
    mean: float
    std: float
    min: float
    max: float
    count: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "min": self.min, "max": self.max, "count": self.count}


@dataclass
class DatasetSummary:
    n_sequences: int
    metrics: dict = field(default_factory=dict)  # name -> MetricSummary
    totals: dict = field(default_factory=dict)
    pooled_coherence: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_sequences": self.n_sequences,
            "metrics": {k: v.to_dict() for k, v in self.metrics.items()},
            "totals": self.totals,
            "pooled_coherence": {str(k): v for k, v in self.pooled_coherence.items()},
        }


def summarize(values) -> MetricSummary:
    """Population mean/std with min and max; None entries are skipped."""
    vals = np.asarray([v for v in values if v is not None and not _isnan(v)], dtype=np.float64)
    if not len(vals):
        raise ValueError("no values to summarize")
    return MetricSummary(float(vals.mean()), float(vals.std()), float(vals.min()),
                         float(vals.max()), len(vals))


def _isnan(v) -> bool:
    return isinstance(v, float) and math.isnan(v)


def dataset_summary(stats) -> DatasetSummary:
    stats = list(stats)
    if not stats:
        raise ValueError("dataset summary needs at least one sequence")
    rows = [s.row() for s in stats]
    metrics = {}
    for key in rows[0]:
        if key in ("source_id", "label"):
            continue
        col = [r.get(key) for r in rows]
        if all(v is None for v in col):
            continue
        metrics[key] = summarize(col)
    n_pos = sum(s.n_pos for s in stats)
    n_neg = sum(s.n_neg for s in stats)
    n_all = n_pos + n_neg
    totals = {
        "events": n_all,
        "pos": n_pos,
        "neg": n_neg,
        "pos_share_pct": 100.0 * n_pos / n_all if n_all else None,
        "neg_share_pct": 100.0 * n_neg / n_all if n_all else None,
        "cross_duplicates": sum(s.n_cross_polarity_duplicates for s in stats),
    }
    totals["cross_duplicate_pct"] = (
        100.0 * totals["cross_duplicates"] / n_all if n_all else None)
    # event-weighted coherence over every voxel of the dataset
    pooled = {}
    with_coh = [s for s in stats if s.coherence]
    weight = sum(s.n_voxels for s in with_coh)
    if weight:
        for n in with_coh[0].coherence:
            pooled[n] = sum(s.coherence[n] * s.n_voxels for s in with_coh) / weight
    return DatasetSummary(len(stats), metrics, totals, pooled)

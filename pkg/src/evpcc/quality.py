"""Rate/quality metrics for coded event data.

Both PSNR variants compare events of the same polarity only, in a common
space where the timestamp (seconds) is scaled by a fixed reference TSF and
left unrounded. Each direction's error is pooled over all points of both
polarities; the worse direction sets the PSNR.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .event_io import NEG, POS, EventSequence
from .pc_model import NeighborIndex

REF_TSF = 256
E2D_NEIGHBORS = 31


class UndefinedMetricError(ValueError):
    pass


class InsufficientPointsError(ValueError):
    pass


class NoOverlapError(ValueError):
    pass


class PredictionFormatError(ValueError):
    pass


class UnknownSequenceError(KeyError):
    pass


@dataclass(frozen=True)
class MetricSpace:
    ref_tsf: int = REF_TSF
    peak: Optional[float] = None

    def __post_init__(self):
        if self.peak is not None and not self.peak > 0:
            raise ValueError("peak must be positive")


def to_metric_space(seq: EventSequence, ref_tsf: int = REF_TSF) -> dict:
    """{POS: (n, 3) float array, NEG: ...} with z = t_seconds * ref_tsf, unrounded."""
    z = seq.t * float(ref_tsf) / seq.units_per_second
    pts = np.stack([seq.x.astype(np.float64), seq.y.astype(np.float64), z], axis=1)
    return {POS: pts[seq.p == POS], NEG: pts[seq.p == NEG]}


def cloud_to_metric_space(points, tsf: int, ref_tsf: int = REF_TSF) -> np.ndarray:
    """Map voxel coordinates coded at ``tsf`` into the reference space."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3).copy()
    pts[:, 2] = pts[:, 2] * ref_tsf / tsf
    return pts


def default_peak(ref: dict) -> float:
    """Largest per-axis extent of the reference points."""
    pts = np.concatenate([ref[POS], ref[NEG]])
    if not len(pts):
        raise UndefinedMetricError("empty reference: no default peak")
    peak = float((pts.max(axis=0) - pts.min(axis=0)).max())
    if peak <= 0:
        raise UndefinedMetricError("reference has zero extent; pass an explicit peak")
    return peak


def _as_space(obj, ref_tsf) -> dict:
    if isinstance(obj, EventSequence):
        return to_metric_space(obj, ref_tsf)
    return {POS: np.asarray(obj[POS], dtype=np.float64).reshape(-1, 3),
            NEG: np.asarray(obj[NEG], dtype=np.float64).reshape(-1, 3)}


def _check_polarities(a: dict, b: dict):
    present = [p for p in (POS, NEG) if len(a[p]) or len(b[p])]
    if not present:
        raise UndefinedMetricError("both sequences are empty")
    for p in present:
        if not len(a[p]) or not len(b[p]):
            name = "POS" if p == POS else "NEG"
            raise UndefinedMetricError(f"{name} events present on only one side")
    return present


def _psnr(peak: float, mse: float) -> float:
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def directional_mse_e2e(a: dict, b: dict, polarities) -> float:
    total = 0.0
    count = 0
    for p in polarities:
        _, d2 = NeighborIndex(b[p]).query_many(a[p], 1)
        total += float(d2.sum())
        count += len(a[p])
    return total / count


def psnr_e2e(ref, dec, space: MetricSpace = MetricSpace(), return_details: bool = False):
    """Point-to-point PSNR with polarity-constrained nearest neighbours."""
    a, b = _as_space(ref, space.ref_tsf), _as_space(dec, space.ref_tsf)
    pols = _check_polarities(a, b)
    peak = space.peak if space.peak is not None else default_peak(a)
    mse_ab = directional_mse_e2e(a, b, pols)
    mse_ba = directional_mse_e2e(b, a, pols)
    value = _psnr(peak, max(mse_ab, mse_ba))
    if return_details:
        return value, {"mse_ref_to_dec": mse_ab, "mse_dec_to_ref": mse_ba, "peak": peak}
    return value


def regularize(cov: np.ndarray) -> np.ndarray:
    """Add eps * I with eps = 1e-6 * trace / 3 (1e-9 for an all-zero trace)."""
    tr = np.trace(cov, axis1=-2, axis2=-1)
    eps = np.where(tr > 0, 1e-6 * tr / 3.0, 1e-9)
    return cov + eps[..., None, None] * np.eye(3)


def mahalanobis_sq(points: np.ndarray, target: np.ndarray, k: int = E2D_NEIGHBORS) -> np.ndarray:
    """Squared Mahalanobis distance of each point to its k nearest targets' distribution."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(target) < k:
        raise InsufficientPointsError(f"E2D needs at least {k} target points, got {len(target)}")
    idx, _ = NeighborIndex(target).query_many(points, k)
    nb = target[idx]  # (n, k, 3)
    mu = nb.mean(axis=1)
    dev = nb - mu[:, None, :]
    cov = np.einsum("nki,nkj->nij", dev, dev) / k
    diff = points - mu
    sol = np.linalg.solve(regularize(cov), diff[..., None])[..., 0]
    return np.einsum("ni,ni->n", diff, sol)


def directional_mse_e2d(a: dict, b: dict, polarities, k: int) -> float:
    total = 0.0
    count = 0
    for p in polarities:
        total += float(mahalanobis_sq(a[p], b[p], k).sum())
        count += len(a[p])
    return total / count


def psnr_e2d(ref, dec, space: MetricSpace = MetricSpace(), k: int = E2D_NEIGHBORS,
             return_details: bool = False):
    """Point-to-distribution PSNR using Mahalanobis distance to k same-polarity neighbours."""
    a, b = _as_space(ref, space.ref_tsf), _as_space(dec, space.ref_tsf)
    pols = _check_polarities(a, b)
    peak = space.peak if space.peak is not None else default_peak(a)
    mse_ab = directional_mse_e2d(a, b, pols, k)
    mse_ba = directional_mse_e2d(b, a, pols, k)
    value = _psnr(peak, max(mse_ab, mse_ba))
    if return_details:
        return value, {"mse_ref_to_dec": mse_ab, "mse_dec_to_ref": mse_ba, "peak": peak}
    return value


# ------------------------------------------------------------------- BD-Rate

@dataclass
class RateDistortionCurve:
    rates: np.ndarray
    scores: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=np.float64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.rates) != len(self.scores):
            raise ValueError("rates and scores differ in length")
        if np.any(self.rates <= 0):
            raise ValueError("rates must be positive")
        if np.any(np.diff(self.rates) <= 0):
            raise ValueError("rates must be strictly increasing")

    def __len__(self) -> int:
        return len(self.rates)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("rate,score\n")
        for r, s in zip(self.rates.tolist(), self.scores.tolist()):
            buf.write(f"{r!r},{s!r}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, label: str = "") -> "RateDistortionCurve":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or not {"rate", "score"} <= set(reader.fieldnames):
            raise ValueError("curve CSV needs a 'rate,score' header")
        rows = [(float(r["rate"]), float(r["score"])) for r in reader]
        rows.sort()
        return cls([r for r, _ in rows], [s for _, s in rows], label)


def fit_log_rate(curve: RateDistortionCurve) -> np.ndarray:
    """Cubic coefficients (highest first) of log10(rate) as a function of score."""
    return np.polyfit(curve.scores, np.log10(curve.rates), 3)


def bd_rate(curve_ref: RateDistortionCurve, curve_test: RateDistortionCurve) -> float:
    """Bjontegaard delta rate of ``curve_test`` against ``curve_ref`` in percent.

    Negative values mean the test curve needs less rate for the same score.
    """
    for c in (curve_ref, curve_test):
        if len(c) < 4:
            raise InsufficientPointsError(f"BD-Rate needs >= 4 points per curve, got {len(c)}")
    lo = max(curve_ref.scores.min(), curve_test.scores.min())
    hi = min(curve_ref.scores.max(), curve_test.scores.max())
    if not hi > lo:
        raise NoOverlapError("score ranges of the two curves do not overlap")
    p_ref = np.polyint(fit_log_rate(curve_ref))
    p_test = np.polyint(fit_log_rate(curve_test))
    int_ref = np.polyval(p_ref, hi) - np.polyval(p_ref, lo)
    int_test = np.polyval(p_test, hi) - np.polyval(p_test, lo)
    avg = (int_test - int_ref) / (hi - lo)
    return float((10.0 ** avg - 1.0) * 100.0)


# ------------------------------------------------------------------- Top-k

def read_predictions(text: str) -> dict:
    """Parse a predictions CSV into ``{source_id: [labels best first]}``.

    Accepted rows: ``source_id,rank1,rank2,...`` or
    ``source_id,label:score;label:score;...``. A header row starting with
    ``source_id`` is required. Equal scores rank by label.
    """
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header or header[0].strip() != "source_id":
        raise PredictionFormatError("predictions CSV must start with a 'source_id' header")
    preds = {}
    for lineno, row in enumerate(reader, start=2):
        row = [c.strip() for c in row]
        if not row or not any(row):
            continue
        if len(row) < 2 or not row[0]:
            raise PredictionFormatError(f"line {lineno}: expected source_id and predictions")
        sid = row[0]
        if len(row) == 2 and ":" in row[1]:
            pairs = []
            for item in row[1].split(";"):
                if not item:
                    continue
                label, sep, score = item.rpartition(":")
                if not sep or not label:
                    raise PredictionFormatError(f"line {lineno}: bad item {item!r}")
                try:
                    pairs.append((-float(score), label))
                except ValueError:
                    raise PredictionFormatError(f"line {lineno}: bad score in {item!r}") from None
            ranked = [label for _, label in sorted(pairs)]
        else:
            ranked = [c for c in row[1:] if c]
        if sid in preds:
            raise PredictionFormatError(f"line {lineno}: duplicate source_id {sid!r}")
        preds[sid] = ranked
    return preds


def read_labels(text: str) -> dict:
    """Ground truth CSV with header ``source_id,label``."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or not {"source_id", "label"} <= set(reader.fieldnames):
        raise PredictionFormatError("labels CSV needs a 'source_id,label' header")
    return {r["source_id"].strip(): r["label"].strip() for r in reader}


def top_k(predictions: dict, truth: dict, k: int) -> float:
    """Percentage of predicted sequences whose true label is among the first k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not predictions:
        raise ValueError("no predictions")
    hits = 0
    for sid, ranked in predictions.items():
        if sid not in truth:
            raise UnknownSequenceError(f"unknown sequence {sid!r}")
        hits += truth[sid] in ranked[:k]
    return 100.0 * hits / len(predictions)

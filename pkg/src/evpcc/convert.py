"""Event <-> point cloud conversion.

Forward: timestamps are scaled to ``z = round(t_seconds * tsf)``, events are
snapped to integer voxels, same-polarity repeats are dropped and the result is
split into one cloud per polarity.

Backward: the two clouds are merged, voxels present in both are assigned a
single polarity (nearest-neighbour vote or occupancy score), and z is rescaled
to the stored timestamp unit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
import numpy as np
from scipy.spatial import cKDTree

from .event_io import NEG, POS, EventSequence
from .pc_model import EventPointCloud

DUP_METHODS = ("nn", "prob")

# polarity given to a duplicate when every non-duplicate vote ties
TIE_FALLBACK = POS


class MissingScoresError(ValueError):
    pass


class NoCandidatesError(ValueError):
    pass


@dataclass(frozen=True)
class ConversionConfig:
    tsf: int = 256
    duplicate_method: str = "nn"

    def __post_init__(self):
        if int(self.tsf) != self.tsf or self.tsf < 1:
            raise ValueError("tsf must be a positive integer")
        if self.duplicate_method not in DUP_METHODS:
            raise ValueError(f"duplicate_method must be one of {DUP_METHODS}")


@dataclass
class ConversionStats:
    n_input_events: int = 0
    n_discarded_same_polarity: int = 0
    n_cross_polarity_duplicates: int = 0
    n_output_points_pos: int = 0
    n_output_points_neg: int = 0

    @property
    def discarded_pct(self) -> float:
        if not self.n_input_events:
            return 0.0
        return 100.0 * self.n_discarded_same_polarity / self.n_input_events

    def to_dict(self) -> dict:
        d = asdict(self)
        d["discarded_pct"] = self.discarded_pct
        return d


def round_ratio(num, den):
    """round(num / den) for non-negative integers, halves away from zero, exact."""
    num = np.asarray(num, dtype=np.int64)
    return (2 * num + den) // (2 * den)


def scale_timestamps(t_raw, units_per_second: int, tsf: int) -> np.ndarray:
    """Voxel z coordinate for stored timestamps: round(t_raw / ups * tsf)."""
    return round_ratio(np.asarray(t_raw, dtype=np.int64) * int(tsf), int(units_per_second))


def rescale_z(z, units_per_second: int, tsf: int) -> np.ndarray:
    """Stored timestamp for voxel z: round(z / tsf * ups)."""
    return round_ratio(np.asarray(z, dtype=np.int64) * int(units_per_second), int(tsf))


def voxelize(seq: EventSequence, tsf: int) -> np.ndarray:
    """(n, 4) int array of (x, y, z, p) before any deduplication."""
    z = scale_timestamps(seq.t, seq.units_per_second, tsf)
    return np.stack([seq.x, seq.y, z, seq.p], axis=1)


def event_to_pc(seq: EventSequence, cfg: ConversionConfig = ConversionConfig()):
    """Convert events into (pos_cloud, neg_cloud, stats)."""
    vox = voxelize(seq, cfg.tsf)
    uniq = np.unique(vox, axis=0) if len(vox) else vox.reshape(0, 4)
    pos = uniq[uniq[:, 3] == POS, :3]
    neg = uniq[uniq[:, 3] == NEG, :3]
    cross = count_common_points(pos, neg)
    stats = ConversionStats(
        n_input_events=len(seq),
        n_discarded_same_polarity=len(vox) - len(uniq),
        n_cross_polarity_duplicates=cross,
        n_output_points_pos=len(pos),
        n_output_points_neg=len(neg),
    )
    return EventPointCloud(POS, pos), EventPointCloud(NEG, neg), stats


def count_common_points(a: np.ndarray, b: np.ndarray) -> int:
    """Number of rows present in both (row-unique) integer arrays."""
    if not len(a) or not len(b):
        return 0
    both = np.concatenate([a, b])
    _, counts = np.unique(both, axis=0, return_counts=True)
    return int((counts > 1).sum())


def _row_keys(points: np.ndarray) -> np.ndarray:
    """Structured view so rows can be compared with np.isin-style set ops."""
    p = np.ascontiguousarray(np.asarray(points, dtype=np.int64).reshape(-1, 3))
    return p.view([("x", np.int64), ("y", np.int64), ("z", np.int64)]).reshape(-1)


def split_duplicates(pos: EventPointCloud, neg: EventPointCloud):
    """Boolean masks over pos.points / neg.points flagging voxels present in both."""
    kp, kn = _row_keys(pos.points), _row_keys(neg.points)
    return np.isin(kp, kn), np.isin(kn, kp)


def resolve_duplicates_nn(points, polarities, duplicates) -> np.ndarray:
    """Polarity for each duplicate voxel by growing nearest-neighbour majority.

    ``points``/``polarities`` describe the non-duplicate candidates. For each
    duplicate the candidates are visited in whole equal-distance groups;
    after each group the running POS/NEG tally decides as soon as it is not
    tied. An exhausted tie falls back to :data:`TIE_FALLBACK`.
    """
    points = np.asarray(points, dtype=np.int64).reshape(-1, 3)
    polarities = np.asarray(polarities, dtype=np.int64).reshape(-1)
    duplicates = np.asarray(duplicates, dtype=np.int64).reshape(-1, 3)
    if len(duplicates) == 0:
        return np.zeros(0, dtype=np.int64)
    n = len(points)
    if n == 0:
        raise NoCandidatesError("every voxel is a different-polarity duplicate")
    tree = cKDTree(points)
    out = np.empty(len(duplicates), dtype=np.int64)
    for i, v in enumerate(duplicates):
        out[i] = _nn_vote(tree, points, polarities, v, n)
    return out


def _nn_vote(tree, points, polarities, v, n) -> int:
    k = min(8, n)
    done = 0  # number of candidates already tallied (always whole groups)
    pos = neg = 0
    while True:
        _, idx = tree.query(v, k=k)
        idx = np.atleast_1d(idx)
        d2 = ((points[idx] - v) ** 2).sum(axis=1)
        order = np.argsort(d2, kind="stable")
        d2, pol = d2[order], polarities[idx][order]
        # the farthest returned group may be cut short unless everything was returned
        limit = k if k == n else int(np.searchsorted(d2, d2[-1], side="left"))
        j = done
        while j < limit:
            g_end = int(np.searchsorted(d2, d2[j], side="right"))
            grp = pol[j:g_end]
            npos = int((grp == POS).sum())
            pos += npos
            neg += len(grp) - npos
            j = g_end
            if pos != neg:
                return POS if pos > neg else NEG
        done = j
        if k == n:
            return TIE_FALLBACK
        k = min(2 * k, n)


def resolve_duplicates_prob(duplicates, pos_scores, neg_scores, nn_fallback=None) -> np.ndarray:
    """Polarity for each duplicate from the higher occupancy score.

    ``pos_scores``/``neg_scores`` are aligned with ``duplicates``. Exact ties
    take the polarity from ``nn_fallback(indices)``, which must return the
    nearest-neighbour assignment for the tied duplicates.
    """
    duplicates = np.asarray(duplicates).reshape(-1, 3)
    if pos_scores is None or neg_scores is None:
        raise MissingScoresError("probability method needs scores for both clouds")
    sp = np.asarray(pos_scores, dtype=np.float64).reshape(-1)
    sn = np.asarray(neg_scores, dtype=np.float64).reshape(-1)
    if len(sp) != len(duplicates) or len(sn) != len(duplicates):
        raise MissingScoresError("a score is missing for some duplicate voxel")
    out = np.where(sp > sn, POS, NEG).astype(np.int64)
    tied = np.flatnonzero(sp == sn)
    if len(tied):
        if nn_fallback is None:
            raise ValueError("tied scores need an NN fallback")
        out[tied] = nn_fallback(tied)
    return out


def merge_clouds(pos: EventPointCloud, neg: EventPointCloud, cfg: ConversionConfig):
    """Merge both clouds into (points, polarity) with duplicates resolved.

    Returns the merged (n, 3) points, their polarities and the number of
    different-polarity duplicates that were resolved.
    """
    dup_p, dup_n = split_duplicates(pos, neg)
    cand_pts = np.concatenate([pos.points[~dup_p], neg.points[~dup_n]])
    cand_pol = np.concatenate([
        np.full((~dup_p).sum(), POS, dtype=np.int64),
        np.full((~dup_n).sum(), NEG, dtype=np.int64),
    ])
    dups = pos.points[dup_p]  # both clouds sorted, so same order as neg.points[dup_n]
    if cfg.duplicate_method == "prob" and len(dups):
        if pos.scores is None or neg.scores is None:
            raise MissingScoresError("probability method needs scores for both clouds")
        dup_pol = resolve_duplicates_prob(
            dups, pos.scores[dup_p], neg.scores[dup_n],
            nn_fallback=lambda i: resolve_duplicates_nn(cand_pts, cand_pol, dups[i]),
        )
    else:
        dup_pol = resolve_duplicates_nn(cand_pts, cand_pol, dups)
    points = np.concatenate([cand_pts, dups]).reshape(-1, 3)
    pol = np.concatenate([cand_pol, dup_pol])
    return points, pol, len(dups)


def pc_to_event(pos: EventPointCloud, neg: EventPointCloud,
                cfg: ConversionConfig = ConversionConfig(),
                units_per_second: int = 1_000_000, **meta) -> EventSequence:
    """Convert a pair of polarity clouds back to an event sequence.

    Output is ordered by (t_raw, x, y). If rescaling maps distinct voxels onto
    the same (x, y, t_raw) (only possible when tsf exceeds units_per_second),
    the voxel with the lowest z is kept.
    """
    seq, _ = pc_to_event_with_count(pos, neg, cfg, units_per_second, **meta)
    return seq


def pc_to_event_with_count(pos, neg, cfg=ConversionConfig(), units_per_second=1_000_000, **meta):
    points, pol, n_dups = merge_clouds(pos, neg, cfg)
    t = rescale_z(points[:, 2], units_per_second, cfg.tsf)
    x, y = points[:, 0], points[:, 1]
    order = np.lexsort((points[:, 2], y, x, t))
    x, y, t, pol = x[order], y[order], t[order], pol[order]
    if len(t) > 1:
        keep = np.ones(len(t), dtype=bool)
        keep[1:] = (t[1:] != t[:-1]) | (x[1:] != x[:-1]) | (y[1:] != y[:-1])
        x, y, t, pol = x[keep], y[keep], t[keep], pol[keep]
    seq = EventSequence(x, y, t, pol, units_per_second=units_per_second, **meta)
    return seq, n_dups

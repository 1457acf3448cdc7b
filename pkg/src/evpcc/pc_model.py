"""Integer voxel point clouds, exact kNN, and PLY serialization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .event_io import NEG, POS


class EmptyIndexError(ValueError):
    pass


class PlyFormatError(ValueError):
    pass


def lex_order(points: np.ndarray) -> np.ndarray:
    """Indices sorting rows of an (n, 3) array lexicographically by (x, y, z)."""
    points = np.asarray(points)
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))


@dataclass
class EventPointCloud:
    """Single-polarity set of integer voxels, optionally with occupancy scores.

    Points are kept sorted lexicographically and unique; ``scores`` (when
    present) is aligned with ``points``.
    """

    polarity: int
    points: np.ndarray
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.polarity not in (NEG, POS):
            raise ValueError(f"bad polarity {self.polarity}")
        pts = np.asarray(self.points, dtype=np.int64).reshape(-1, 3)
        if pts.size and pts.min() < 0:
            raise ValueError("point coordinates must be non-negative")
        order = lex_order(pts)
        pts = pts[order]
        if len(pts) > 1 and (np.diff(pts, axis=0) == 0).all(axis=1).any():
            raise ValueError("duplicate points in cloud")
        self.points = pts
        if self.scores is not None:
            s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
            if len(s) != len(pts):
                raise ValueError("scores must align with points")
            self.scores = s[order]

    @classmethod
    def from_unsorted(cls, polarity: int, points, scores=None) -> "EventPointCloud":
        """Build a cloud, silently collapsing repeated points (first score wins)."""
        pts = np.asarray(points, dtype=np.int64).reshape(-1, 3)
        _, first = np.unique(pts, axis=0, return_index=True)
        first = np.sort(first)
        s = None if scores is None else np.asarray(scores, dtype=np.float64)[first]
        return cls(polarity, pts[first], s)

    def __len__(self) -> int:
        return len(self.points)

    def point_set(self) -> set:
        return set(map(tuple, self.points.tolist()))

    def score_map(self) -> dict:
        if self.scores is None:
            return {}
        return dict(zip(map(tuple, self.points.tolist()), self.scores.tolist()))


class NeighborIndex:
    """Exact k-nearest-neighbour search under squared Euclidean distance.

    Results are ordered by (distance, x, y, z, insertion index), so ties are
    resolved lexicographically and never depend on the tree layout.
    """

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.points = pts
        self._tree = cKDTree(pts) if len(pts) else None
        # rank of each point in lexicographic order (ties by index)
        self._rank = np.empty(len(pts), dtype=np.int64)
        self._rank[lex_order(pts)] = np.arange(len(pts))

    def __len__(self) -> int:
        return len(self.points)

    def _check(self):
        if self._tree is None:
            raise EmptyIndexError("neighbor index is empty")

    def _sqdist(self, q, idx):
        d = self.points[idx] - q
        return np.einsum("...j,...j->...", d, d)

    def _exact_row(self, q, k, skip):
        """Slow path: gather every candidate up to the k-th distance and sort."""
        n = len(self.points)
        kk = min(k + (skip is not None), n)
        dist, _ = self._tree.query(q, k=kk)
        radius = float(np.atleast_1d(dist)[-1])
        cand = np.asarray(self._tree.query_ball_point(q, r=radius * (1 + 1e-9) + 1e-12), dtype=np.int64)
        if skip is not None:
            cand = cand[cand != skip]
        d2 = self._sqdist(q, cand)
        order = np.lexsort((self._rank[cand], d2))[:k]
        return cand[order], d2[order]

    def query(self, q, k: int, exclude_self: bool = False):
        """k nearest neighbours of one query point: (indices, squared distances).

        With ``exclude_self`` one stored point coincident with ``q`` is skipped.
        """
        self._check()
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(q, dtype=np.float64).reshape(3)
        skip = None
        if exclude_self:
            hits = self._tree.query_ball_point(q, r=0.0)
            if hits:
                skip = min(hits, key=lambda i: self._rank[i])
        k = min(k, len(self.points) - (skip is not None))
        if k <= 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        return self._exact_row(q, k, skip)

    def knn(self, q, k: int, exclude_self: bool = False):
        """Like :meth:`query` but returns ``[(point_tuple, squared_distance), ...]``."""
        idx, d2 = self.query(q, k, exclude_self)
        return [(tuple(self.points[i].tolist()), float(d)) for i, d in zip(idx, d2)]

    def query_many(self, queries, k: int, self_indices=None):
        """Batched exact kNN.

        ``self_indices[i]`` (if given) is the index of the stored point that
        query ``i`` must skip. Returns (n, k') index and squared-distance arrays,
        with k' = min(k, available points).
        """
        self._check()
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        skip = self_indices is not None
        k = min(k, n - skip)
        if k <= 0 or len(queries) == 0:
            return (np.zeros((len(queries), 0), dtype=np.int64),
                    np.zeros((len(queries), 0)))
        # extra neighbours reveal whether the k-th distance tie group was cut;
        # integer grids tie often, so the margin is generous
        kk = min(k + skip + max(8, k), n)
        _, idx = self._tree.query(queries, k=kk)
        idx = idx.reshape(len(queries), kk)
        d2 = self._sqdist(queries[:, None, :], idx)
        if skip:
            own = idx == np.asarray(self_indices)[:, None]
            # push the query's own point to the end of its row
            d2 = np.where(own, np.inf, d2)
        order = _row_lexsort(d2, self._rank[idx])
        idx = np.take_along_axis(idx, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        out_idx = idx[:, :k].copy()
        out_d2 = d2[:, :k].copy()
        if kk < n:
            # rows where the next candidate ties the k-th distance may be missing
            # tied points that cKDTree did not return; redo those exactly
            cut = d2[:, -1 - skip] == d2[:, k - 1]
            for r in np.flatnonzero(cut):
                s = None if not skip else int(self_indices[r])
                out_idx[r], out_d2[r] = self._exact_row(queries[r], k, s)
        return out_idx, out_d2


def _row_lexsort(primary: np.ndarray, secondary: np.ndarray) -> np.ndarray:
    """Per-row argsort by (primary, secondary)."""
    order = np.argsort(secondary, axis=1, kind="stable")
    p = np.take_along_axis(primary, order, axis=1)
    order2 = np.argsort(p, axis=1, kind="stable")
    return np.take_along_axis(order, order2, axis=1)


# --------------------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(pc: EventPointCloud) -> bytes:
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment polarity {'POS' if pc.polarity == POS else 'NEG'}",
        f"element vertex {len(pc)}",
        "property int x",
        "property int y",
        "property int z",
    ]
    if pc.scores is not None:
        lines.append("property double score")
    lines.append("end_header")
    body = []
    if pc.scores is None:
        body = [f"{x} {y} {z}" for x, y, z in pc.points.tolist()]
    else:
        body = [f"{x} {y} {z} {s!r}" for (x, y, z), s in zip(pc.points.tolist(), pc.scores.tolist())]
    return ("\n".join(lines + body) + "\n").encode("ascii")


def _parse_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyFormatError("missing ply magic or end_header")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    header = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    polarity = None
    elements = []  # (name, count, [(prop, type)])
    for line in header[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "comment" and len(tok) >= 3 and tok[1] == "polarity":
            polarity = POS if tok[2].upper() == "POS" else NEG
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyFormatError("property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[-1], "list"))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise PlyFormatError(f"unknown property type {tok[1]}")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        elif tok[0] in ("obj_info",):
            continue
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise PlyFormatError(f"unsupported PLY format {fmt!r}")
    if not elements or elements[0][0] != "vertex":
        raise PlyFormatError("first element must be vertex")
    return fmt, polarity, elements, body_start


def read_ply(data: bytes, polarity: Optional[int] = None) -> EventPointCloud:
    """Parse ASCII or binary PLY vertices into an :class:`EventPointCloud`.

    Coordinates must be integer-valued. A ``score`` vertex property, when
    present, becomes the cloud's occupancy scores. Polarity comes from the
    argument, else from a ``comment polarity`` header line, else POS.
    """
    fmt, hdr_pol, elements, start = _parse_header(data)
    _, count, props = elements[0]
    names = [p for p, _ in props]
    for axis in "xyz":
        if axis not in names:
            raise PlyFormatError(f"vertex element lacks property {axis}")
    if fmt == "ascii":
        lines = data[start:].decode("ascii").split("\n")
        rows = [ln.split() for ln in lines if ln.strip()][:count]
        if len(rows) < count:
            raise PlyFormatError(f"expected {count} vertices, found {len(rows)}")
        if any(len(r) < len(names) for r in rows):
            raise PlyFormatError("short vertex row")
        table = np.array([r[: len(names)] for r in rows], dtype=np.float64).reshape(count, len(names))
        cols = {n: table[:, i] for i, n in enumerate(names)}
    else:
        if any(t == "list" for _, t in props):
            raise PlyFormatError("list properties in vertex element are not supported")
        bo = "<" if fmt == "binary_little_endian" else ">"
        dtype = np.dtype([(n, bo + t) for n, t in props])
        need = dtype.itemsize * count
        if len(data) - start < need:
            raise PlyFormatError("binary vertex block truncated")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=start)
        cols = {n: arr[n].astype(np.float64) for n in names}
    xyz = np.stack([cols["x"], cols["y"], cols["z"]], axis=1) if count else np.zeros((0, 3))
    if not np.all(np.isfinite(xyz)) or not np.array_equal(xyz, np.round(xyz)):
        raise PlyFormatError("non-integer vertex coordinates")
    pol = polarity if polarity is not None else (hdr_pol if hdr_pol is not None else POS)
    scores = cols.get("score")
    return EventPointCloud.from_unsorted(pol, xyz.astype(np.int64), scores)

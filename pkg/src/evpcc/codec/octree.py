"""Octree geometry codec for integer point clouds.

Nodes are visited breadth first. Each internal node emits one occupancy byte
whose bit ``(dx << 2) | (dy << 1) | dz`` marks child octant (dx, dy, dz).
Sorting nodes of a level by Morton code gives exactly that breadth-first
order, so both sides work level by level on sorted code arrays.

Lossy mode stops ``truncate_levels`` levels above the leaves and the decoder
puts one point at the centre of every surviving node.

Stream layout (little endian)::

    magic      4s   b"EOC1"
    origin     3i   per-axis minima
    extent     3I   per-axis (max - min)
    depth      B
    truncate   B
    radius     B    occupancy-score window radius
    flags      B    reserved, 0
    n_points   I    points in the encoded cloud
    n_leaves   I    nodes at the deepest coded level
    payload    ...  range-coded occupancy bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..event_io import POS
from ..pc_model import EventPointCloud
from .rangecoder import AdaptiveModel, CorruptPayloadError, RangeDecoder, RangeEncoder

MAGIC = b"EOC1"
HEADER = struct.Struct("<4s3i3I4B2I")
MAX_DEPTH = 21  # 3 * 21 bits of Morton code fit in int64

# children of a node in bit order: CHILD_BITS[occupancy] lists set octants
_BITS = np.unpackbits(np.arange(256, dtype=np.uint8)[:, None], axis=1, bitorder="little").astype(bool)


class EmptyCloudError(ValueError):
    pass


class CoordinateOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class OctreeConfig:
    mode: str = "lossless"
    truncate_levels: int = 0
    score_radius: int = 2

    def __post_init__(self):
        if self.mode not in ("lossless", "lossy"):
            raise ValueError("mode must be 'lossless' or 'lossy'")
        if self.truncate_levels < 0:
            raise ValueError("truncate_levels must be >= 0")
        if self.mode == "lossless" and self.truncate_levels:
            raise ValueError("lossless mode cannot truncate levels")
        if not 1 <= self.score_radius <= 255:
            raise ValueError("score_radius must be in [1, 255]")

    @classmethod
    def lossy(cls, truncate_levels: int, score_radius: int = 2) -> "OctreeConfig":
        if truncate_levels == 0:
            return cls("lossless", 0, score_radius)
        return cls("lossy", truncate_levels, score_radius)


@dataclass
class OctreeBitstream:
    origin: tuple
    extent: tuple
    depth: int
    truncate_levels: int
    score_radius: int
    n_points: int
    n_leaves: int
    payload: bytes

    def to_bytes(self) -> bytes:
        head = HEADER.pack(MAGIC, *self.origin, *self.extent, self.depth,
                           self.truncate_levels, self.score_radius, 0,
                           self.n_points, self.n_leaves)
        return head + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "OctreeBitstream":
        if len(data) < HEADER.size:
            raise CorruptPayloadError("stream shorter than header")
        f = HEADER.unpack_from(data)
        if f[0] != MAGIC:
            raise CorruptPayloadError(f"bad magic {f[0]!r}")
        return cls(origin=tuple(f[1:4]), extent=tuple(f[4:7]), depth=f[7],
                   truncate_levels=f[8], score_radius=f[9], n_points=f[11],
                   n_leaves=f[12], payload=bytes(data[HEADER.size:]))

    def __len__(self) -> int:
        return HEADER.size + len(self.payload)


def morton_encode(coords: np.ndarray, depth: int) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64)
    code = np.zeros(len(c), dtype=np.int64)
    for b in range(depth - 1, -1, -1):
        bits = (c >> b) & 1
        code = (code << 3) | (bits[:, 0] << 2) | (bits[:, 1] << 1) | bits[:, 2]
    return code


def morton_decode(codes: np.ndarray, levels: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    out = np.zeros((len(codes), 3), dtype=np.int64)
    for b in range(levels):
        tri = (codes >> (3 * b)) & 7
        out[:, 0] |= ((tri >> 2) & 1) << b
        out[:, 1] |= ((tri >> 1) & 1) << b
        out[:, 2] |= (tri & 1) << b
    return out


def occupancy_symbols(codes: np.ndarray, depth: int, stop_level: int) -> list:
    """Occupancy bytes for levels ``0 .. stop_level - 1`` in breadth-first order."""
    codes = np.unique(codes)
    symbols = []
    for level in range(stop_level):
        child = np.unique(codes >> (3 * (depth - level - 1)))
        parent = child >> 3
        bit = (np.int64(1) << (child & 7)).astype(np.int64)
        starts = np.flatnonzero(np.r_[True, parent[1:] != parent[:-1]])
        symbols.append(np.bitwise_or.reduceat(bit, starts))
    return np.concatenate(symbols).tolist() if symbols else []


def encode(pc: EventPointCloud, cfg: OctreeConfig = OctreeConfig(), allow_empty: bool = False) -> OctreeBitstream:
    """Encode a cloud. An empty cloud yields a header-only stream when allowed."""
    pts = np.asarray(pc.points, dtype=np.int64).reshape(-1, 3)
    if len(pts) == 0:
        if not allow_empty:
            raise EmptyCloudError("cannot encode an empty point cloud")
        return OctreeBitstream((0, 0, 0), (0, 0, 0), 0, 0, cfg.score_radius, 0, 0, b"")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    if lo.min() < -(1 << 31) or hi.max() >= (1 << 31):
        raise CoordinateOverflowError("coordinates do not fit 32-bit header fields")
    extent = hi - lo
    depth = int(extent.max()).bit_length()
    if depth > MAX_DEPTH:
        raise CoordinateOverflowError(f"cloud extent needs depth {depth} > {MAX_DEPTH}")
    trunc = min(cfg.truncate_levels, depth)
    codes = morton_encode(pts - lo, depth)
    stop = depth - trunc
    symbols = occupancy_symbols(codes, depth, stop)
    n_leaves = len(np.unique(codes >> (3 * trunc)))

    model = AdaptiveModel(255, first=1)
    enc = RangeEncoder()
    for s in symbols:
        enc.encode_symbol(model, s)
    payload = enc.finish() if symbols else b""
    return OctreeBitstream(tuple(int(v) for v in lo), tuple(int(v) for v in extent),
                           depth, trunc, cfg.score_radius, len(pts), n_leaves, payload)


def decode(bs: OctreeBitstream, polarity: int = POS, with_scores: bool = True) -> EventPointCloud:
    """Decode a stream back to a cloud.

    Every reconstructed point gets an occupancy score: the fraction of the
    ``(2r+1)**3`` window around it (Chebyshev radius r) that holds
    reconstructed points.
    """
    if bs.n_points == 0:
        return EventPointCloud(polarity, np.zeros((0, 3), dtype=np.int64),
                               np.zeros(0) if with_scores else None)
    if bs.depth > MAX_DEPTH or bs.truncate_levels > bs.depth:
        raise CorruptPayloadError("header depth fields are inconsistent")
    stop = bs.depth - bs.truncate_levels
    nodes = np.zeros(1, dtype=np.int64)
    model = AdaptiveModel(255, first=1)
    dec = RangeDecoder(bs.payload) if stop else None
    for _ in range(stop):
        occ = np.fromiter((dec.decode_symbol(model) for _ in range(len(nodes))),
                          dtype=np.int64, count=len(nodes))
        mask = _BITS[occ]
        nodes = ((nodes[:, None] << 3) | np.arange(8, dtype=np.int64))[mask]
        if len(nodes) > bs.n_leaves:
            raise CorruptPayloadError("decoded more nodes than the header allows")
        if dec.overrun > 8:
            raise CorruptPayloadError("payload exhausted before the tree was complete")
    if len(nodes) != bs.n_leaves:
        raise CorruptPayloadError(
            f"decoded {len(nodes)} leaves, header says {bs.n_leaves}")
    side = 1 << bs.truncate_levels
    origin = np.asarray(bs.origin, dtype=np.int64)
    corner = morton_decode(nodes, stop) << bs.truncate_levels
    pts = corner + side // 2
    pts = np.minimum(pts, np.asarray(bs.extent, dtype=np.int64)) + origin
    scores = occupancy_scores(pts, bs.score_radius) if with_scores else None
    if bs.truncate_levels == 0 and len(pts) != bs.n_points:
        raise CorruptPayloadError("lossless stream point count mismatch")
    return EventPointCloud(polarity, pts, scores)


def occupancy_scores(points: np.ndarray, radius: int) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not len(pts):
        return np.zeros(0)
    counts = cKDTree(pts).query_ball_point(pts, r=float(radius), p=np.inf, return_length=True)
    return np.asarray(counts, dtype=np.float64) / float((2 * radius + 1) ** 3)


def encode_bytes(pc: EventPointCloud, cfg: OctreeConfig = OctreeConfig(), allow_empty=False) -> bytes:
    return encode(pc, cfg, allow_empty).to_bytes()


def decode_bytes(data: bytes, polarity: int = POS) -> EventPointCloud:
    return decode(OctreeBitstream.from_bytes(data), polarity)


def rate_bpe(pos_stream, neg_stream, n_original_events: int) -> float:
    """Bits per original event for a POS/NEG stream pair (headers included).

    Streams may be :class:`OctreeBitstream`, raw bytes, or byte counts.
    """
    if n_original_events <= 0:
        raise ValueError("rate needs a positive original event count")
    return 8.0 * (_nbytes(pos_stream) + _nbytes(neg_stream)) / n_original_events


def _nbytes(s) -> int:
    if isinstance(s, (int, np.integer)):
        return int(s)
    return len(s)

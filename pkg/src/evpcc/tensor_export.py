"""Fixed-kernel event spike tensors for external classifiers.

Channels are polarity major: NEG bins 0..B-1, then POS bins 0..B-1. Each
event spreads unit mass over its two neighbouring temporal bins with a
linear kernel.

Container: one JSON header line, a newline, then float32 little-endian
values in C, H, W row-major order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .event_io import NEG, POS, EventSequence

SENSOR_HEIGHT = 180
SENSOR_WIDTH = 240
DEFAULT_BINS = 9


class GridError(ValueError):
    pass


class TensorFormatError(ValueError):
    pass


@dataclass
class EventTensor:
    values: np.ndarray  # (2 * bins, height, width)
    bins: int
    t_min: Optional[int] = None
    t_max: Optional[int] = None
    source_id: Optional[str] = None
    meta: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def polarity_block(self, polarity: int) -> np.ndarray:
        b = self.bins
        return self.values[:b] if polarity == NEG else self.values[b:]


def build_tensor(seq: EventSequence, bins: int = DEFAULT_BINS,
                 height: int = SENSOR_HEIGHT, width: int = SENSOR_WIDTH) -> EventTensor:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    values = np.zeros((2 * bins, height, width), dtype=np.float64)
    if len(seq) == 0:
        return EventTensor(values, bins, source_id=seq.source_id)
    if seq.x.max() >= width or seq.y.max() >= height:
        raise GridError(
            f"events reach ({seq.x.max()}, {seq.y.max()}) outside a {width}x{height} grid")
    t0, t1 = int(seq.t.min()), int(seq.t.max())
    if t1 > t0:
        tstar = (seq.t - t0) / (t1 - t0) * (bins - 1)
    else:
        tstar = np.zeros(len(seq))
    lower = np.floor(tstar).astype(np.int64)
    frac = tstar - lower
    chan = lower + np.where(seq.p == POS, bins, 0)
    flat = values.reshape(-1)
    hw = height * width
    cell = seq.y * width + seq.x
    np.add.at(flat, chan * hw + cell, 1.0 - frac)
    upper = lower + 1 < bins
    np.add.at(flat, (chan[upper] + 1) * hw + cell[upper], frac[upper])
    return EventTensor(values, bins, t0, t1, seq.source_id)


def write_tensor(t: EventTensor) -> bytes:
    header = {
        "dims": [int(d) for d in t.values.shape],
        "layout": "C,H,W",
        "dtype": "f32",
        "byte_order": "little",
        "bins": t.bins,
        "t_min": t.t_min,
        "t_max": t.t_max,
        "source_id": t.source_id,
        **({"meta": t.meta} if t.meta else {}),
    }
    body = np.ascontiguousarray(t.values, dtype="<f4").tobytes()
    return json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + body


def read_tensor(data: bytes) -> EventTensor:
    nl = data.find(b"\n")
    if nl < 0:
        raise TensorFormatError("missing header line")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except ValueError as exc:
        raise TensorFormatError(f"bad tensor header: {exc}") from None
    dims = header.get("dims")
    if header.get("dtype") != "f32" or header.get("layout") != "C,H,W" or not dims or len(dims) != 3:
        raise TensorFormatError("unsupported tensor header")
    if dims[0] != 2 * header.get("bins", -1):
        raise TensorFormatError("channel count does not match 2 * bins")
    body = data[nl + 1:]
    expected = 4 * int(np.prod(dims))
    if len(body) != expected:
        raise TensorFormatError(f"body has {len(body)} bytes, header implies {expected}")
    values = np.frombuffer(body, dtype="<f4").reshape(dims).astype(np.float32)
    return EventTensor(values, header["bins"], header.get("t_min"), header.get("t_max"),
                       header.get("source_id"), header.get("meta", {}))

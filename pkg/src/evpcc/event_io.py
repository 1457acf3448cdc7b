"""Event sequence I/O.

Binary layout: one 40-bit word per event, serialized as 5 bytes,
least-significant byte first.

    bits  0-22  timestamp (stored units)
    bit     23  polarity (0 = NEG, 1 = POS)
    bits 24-31  x
    bits 32-39  y
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Union

import numpy as np

NEG = 0
POS = 1

T_BITS = 23
T_MAX = (1 << T_BITS) - 1
XY_MAX = 255
WORD_BYTES = 5

UNITS_PER_SECOND = {"us": 1_000_000, "ms": 1_000, "s": 1}

EVENT_SUFFIXES = (".bin", ".evt.csv")


class FieldOverflowError(ValueError):
    pass


class TruncatedStreamError(ValueError):
    pass


class Event(NamedTuple):
    x: int
    y: int
    t_raw: int
    p: int


@dataclass(frozen=True)
class FormatParams:
    timestamp_unit: str = "us"

    def __post_init__(self):
        if self.timestamp_unit not in UNITS_PER_SECOND:
            raise ValueError(
                f"unknown timestamp unit {self.timestamp_unit!r}, "
                f"expected one of {sorted(UNITS_PER_SECOND)}"
            )

    @property
    def units_per_second(self) -> int:
        return UNITS_PER_SECOND[self.timestamp_unit]


@dataclass
class EventSequence:
    """Columnar event storage; rows are events in time order."""

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    units_per_second: int = 1_000_000
    label: Optional[str] = None
    source_id: Optional[str] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        self.t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        self.p = np.asarray(self.p, dtype=np.int64).reshape(-1)
        n = len(self.x)
        if not (len(self.y) == len(self.t) == len(self.p) == n):
            raise ValueError("event columns must have equal length")
        if self.units_per_second <= 0:
            raise ValueError("units_per_second must be positive")

    @classmethod
    def empty(cls, **kwargs) -> "EventSequence":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, **kwargs)

    @classmethod
    def from_events(cls, events, **kwargs) -> "EventSequence":
        events = list(events)
        if not events:
            return cls.empty(**kwargs)
        arr = np.array([tuple(e) for e in events], dtype=np.int64)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], **kwargs)

    def __len__(self) -> int:
        return len(self.x)

    def __iter__(self) -> Iterator[Event]:
        for row in zip(self.x.tolist(), self.y.tolist(), self.t.tolist(), self.p.tolist()):
            yield Event(*row)

    @property
    def events(self) -> list[Event]:
        return list(self)

    @property
    def t_seconds(self) -> np.ndarray:
        return self.t / self.units_per_second

    def sorted(self) -> "EventSequence":
        """Stable sort by timestamp (file order kept for equal timestamps)."""
        order = np.argsort(self.t, kind="stable")
        return self.take(order)

    def take(self, idx) -> "EventSequence":
        return EventSequence(
            self.x[idx], self.y[idx], self.t[idx], self.p[idx],
            units_per_second=self.units_per_second,
            label=self.label,
            source_id=self.source_id,
        )

    def validate(self) -> None:
        check_fields(self.x, self.y, self.t, self.p)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventSequence):
            return NotImplemented
        return (
            self.units_per_second == other.units_per_second
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.p, other.p)
        )


def check_fields(x, y, t, p) -> None:
    x, y, t, p = (np.asarray(a) for a in (x, y, t, p))
    for name, arr, hi in (("x", x, XY_MAX), ("y", y, XY_MAX), ("t_raw", t, T_MAX), ("p", p, 1)):
        if arr.size and (arr.min() < 0 or arr.max() > hi):
            raise FieldOverflowError(f"field {name} outside [0, {hi}]")


def pack_event(e: Event) -> int:
    x, y, t, p = int(e.x), int(e.y), int(e.t_raw), int(e.p)
    check_fields(x, y, t, p)
    return t | (p << 23) | (x << 24) | (y << 32)


def unpack_event(word: int) -> Event:
    word = int(word)
    if not 0 <= word < (1 << 40):
        raise ValueError("word must fit in 40 bits")
    return Event(
        x=(word >> 24) & 0xFF,
        y=(word >> 32) & 0xFF,
        t_raw=word & T_MAX,
        p=(word >> 23) & 1,
    )


def pack_words(x, y, t, p) -> np.ndarray:
    check_fields(x, y, t, p)
    x, y, t, p = (np.asarray(a, dtype=np.uint64) for a in (x, y, t, p))
    return t | (p << np.uint64(23)) | (x << np.uint64(24)) | (y << np.uint64(32))


def unpack_words(words: np.ndarray):
    w = np.asarray(words, dtype=np.uint64)
    t = (w & np.uint64(T_MAX)).astype(np.int64)
    p = ((w >> np.uint64(23)) & np.uint64(1)).astype(np.int64)
    x = ((w >> np.uint64(24)) & np.uint64(0xFF)).astype(np.int64)
    y = ((w >> np.uint64(32)) & np.uint64(0xFF)).astype(np.int64)
    return x, y, t, p


def read_events(data: bytes, params: FormatParams = FormatParams(), **meta) -> EventSequence:
    if len(data) % WORD_BYTES:
        raise TruncatedStreamError(
            f"stream length {len(data)} is not a multiple of {WORD_BYTES}"
        )
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, WORD_BYTES).astype(np.uint64)
    shifts = np.arange(WORD_BYTES, dtype=np.uint64) * np.uint64(8)
    words = (raw << shifts).sum(axis=1, dtype=np.uint64) if len(raw) else np.zeros(0, np.uint64)
    x, y, t, p = unpack_words(words)
    seq = EventSequence(x, y, t, p, units_per_second=params.units_per_second, **meta)
    return seq.sorted()


def write_events(seq: EventSequence, params: Optional[FormatParams] = None) -> bytes:
    # params only matters for readers; the stored t_raw is written as-is
    words = pack_words(seq.x, seq.y, seq.t, seq.p)
    shifts = np.arange(WORD_BYTES, dtype=np.uint64) * np.uint64(8)
    raw = ((words[:, None] >> shifts) & np.uint64(0xFF)).astype(np.uint8)
    return raw.tobytes()


def read_events_csv(text: str, params: FormatParams = FormatParams(), **meta) -> EventSequence:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        return EventSequence.empty(units_per_second=params.units_per_second, **meta)
    if [h.strip() for h in header] != ["x", "y", "t_raw", "p"]:
        raise ValueError(f"bad event CSV header: {header}")
    rows = [tuple(int(v) for v in row) for row in reader if row]
    seq = EventSequence.from_events(rows, units_per_second=params.units_per_second, **meta)
    seq.validate()
    return seq.sorted()


def write_events_csv(seq: EventSequence) -> str:
    seq.validate()
    buf = io.StringIO()
    buf.write("x,y,t_raw,p\n")
    for e in seq:
        buf.write(f"{e.x},{e.y},{e.t_raw},{e.p}\n")
    return buf.getvalue()


PathLike = Union[str, os.PathLike]


def load_events(path: PathLike, params: FormatParams = FormatParams(), label=None) -> EventSequence:
    """Read a `.bin` or `.evt.csv` event file from disk."""
    path = Path(path)
    meta = dict(label=label, source_id=str(path))
    if path.name.endswith(".evt.csv"):
        return read_events_csv(path.read_text(), params, **meta)
    return read_events(path.read_bytes(), params, **meta)


def save_events(seq: EventSequence, path: PathLike) -> None:
    path = Path(path)
    if path.name.endswith(".evt.csv"):
        path.write_text(write_events_csv(seq))
    else:
        path.write_bytes(write_events(seq))


def walk_dataset(root: PathLike) -> list[tuple[str, str]]:
    """List (label, path) for every event file under root/<label>/.

    Classes and files come back in lexicographic order.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    entries = []
    try:
        class_dirs = sorted(d for d in root.iterdir() if d.is_dir() and not d.name.startswith("."))
        for d in class_dirs:
            files = sorted(
                f for f in d.iterdir()
                if f.is_file() and f.name.endswith(EVENT_SUFFIXES)
            )
            entries.extend((d.name, str(f)) for f in files)
    except OSError as exc:
        raise OSError(f"failed to walk dataset {root}: {exc}") from exc
    return entries

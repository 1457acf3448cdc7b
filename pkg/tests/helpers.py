"""Synthetic event data shared by the test modules."""

import numpy as np

from evpcc.event_io import EventSequence


def random_sequence(rng, n=2000, duration_us=300_000, width=240, height=180, blobs=6,
                    spread=6.0, label=None, source_id=None):
    """Clustered events from a few drifting blobs, roughly like a saccade recording."""
    centers = rng.uniform([20, 20], [width - 20, height - 20], size=(blobs, 2))
    velocity = rng.normal(0, 60, size=(blobs, 2))  # pixels per second
    pol = rng.integers(0, 2, size=blobs)
    which = rng.integers(0, blobs, size=n)
    t = np.sort(rng.integers(0, duration_us, size=n))
    pos = centers[which] + velocity[which] * (t[:, None] / 1e6) + rng.normal(0, spread, (n, 2))
    x = np.clip(np.round(pos[:, 0]), 0, width - 1).astype(np.int64)
    y = np.clip(np.round(pos[:, 1]), 0, height - 1).astype(np.int64)
    flip = rng.random(n) < 0.05
    p = np.where(flip, 1 - pol[which], pol[which])
    return EventSequence(x, y, t, p, label=label, source_id=source_id)


def grid_sequence(rng, n, tsf, units_per_second=1_000_000, n_slots=None):
    """Events with no duplicates of any kind whose timestamps sit on the ups/tsf grid."""
    step = units_per_second // np.gcd(units_per_second, tsf)  # smallest integer multiple of ups/tsf
    n_slots = n_slots or max(1, min(max(4 * n, 64), (2 ** 23 - 1) // step + 1))
    # unique (x, y, slot) triples, random polarity
    keys = rng.choice(256 * 256 * n_slots, size=n, replace=False)
    x = keys % 256
    y = (keys // 256) % 256
    slot = keys // (256 * 256)
    t = slot * step
    keep = t < 2 ** 23
    p = rng.integers(0, 2, size=n)
    seq = EventSequence(x[keep], y[keep], t[keep], p[keep], units_per_second=units_per_second)
    return canonical(seq)


def canonical(seq):
    order = np.lexsort((seq.p, seq.y, seq.x, seq.t))
    return seq.take(order)

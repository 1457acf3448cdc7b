"""Byte-oriented range coder with carry propagation and an adaptive
order-0 frequency model.

The coder keeps a 32-bit range and a 33-bit low value; bytes are shifted out
whenever the range drops below 2**24. Carries into already-produced bytes are
handled by holding back the last byte plus a run of 0xFF bytes.
"""

from __future__ import annotations

TOP = 1 << 24
MASK32 = 0xFFFFFFFF


class CorruptPayloadError(ValueError):
    pass


class AdaptiveModel:
    """Adaptive frequency table over symbols ``first .. first + nsym - 1``.

    Every symbol starts at frequency 1; each coded symbol adds ``increment``.
    When the total reaches ``max_total`` all frequencies are halved (rounding
    up, so none drops to zero).
    """

    def __init__(self, nsym: int, first: int = 0, increment: int = 1, max_total: int = 1 << 16):
        self.nsym = nsym
        self.first = first
        self.increment = increment
        self.max_total = max_total
        self.freq = [1] * nsym
        self.total = nsym
        self._size = 1
        while self._size * 2 <= nsym:
            self._size *= 2
        self._rebuild()

    def _rebuild(self):
        # Fenwick tree over freq
        n = self.nsym
        tree = [0] * (n + 1)
        for i, f in enumerate(self.freq, 1):
            tree[i] += f
            j = i + (i & -i)
            if j <= n:
                tree[j] += tree[i]
        self._tree = tree

    def cum(self, s: int) -> int:
        """Sum of frequencies of symbols strictly below ``s`` (model index)."""
        tree = self._tree
        total = 0
        i = s
        while i > 0:
            total += tree[i]
            i -= i & -i
        return total

    def find(self, target: int) -> int:
        """Model index whose cumulative interval contains ``target``."""
        tree = self._tree
        pos = 0
        step = self._size
        n = self.nsym
        while step:
            nxt = pos + step
            if nxt <= n and tree[nxt] <= target:
                pos = nxt
                target -= tree[nxt]
            step >>= 1
        return pos

    def update(self, s: int) -> None:
        inc = self.increment
        self.freq[s] += inc
        self.total += inc
        tree = self._tree
        n = self.nsym
        i = s + 1
        while i <= n:
            tree[i] += inc
            i += i & -i
        if self.total >= self.max_total:
            self.freq = [(f + 1) >> 1 for f in self.freq]
            self.total = sum(self.freq)
            self._rebuild()


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        low = self.low
        if low < 0xFF000000 or low > MASK32:
            carry = low >> 32
            temp = self.cache
            out = self.out
            while True:
                out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if not self.cache_size:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, cum: int, freq: int, total: int) -> None:
        r = self.range // total
        self.low += r * cum
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_symbol(self, model: AdaptiveModel, symbol: int) -> None:
        s = symbol - model.first
        if not 0 <= s < model.nsym:
            raise ValueError(f"symbol {symbol} outside model alphabet")
        self.encode(model.cum(s), model.freq[s], model.total)
        model.update(s)

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(5):
            self.code = ((self.code << 8) | self._next()) & MASK32

    def _next(self) -> int:
        p = self.pos
        self.pos = p + 1
        return self.data[p] if p < len(self.data) else 0

    @property
    def overrun(self) -> int:
        """Bytes requested beyond the end of the payload."""
        return max(0, self.pos - len(self.data))

    def decode_symbol(self, model: AdaptiveModel) -> int:
        total = model.total
        r = self.range // total
        v = self.code // r
        if v >= total:
            raise CorruptPayloadError("range decoder out of sync")
        s = model.find(v)
        cum = model.cum(s)
        self.code -= r * cum
        self.range = r * model.freq[s]
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next()) & MASK32
            self.range <<= 8
        model.update(s)
        return s + model.first

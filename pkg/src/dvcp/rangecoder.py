"""32-bit renormalizing arithmetic coder over integer frequency tables.

Frequency tables are cumulative lists ``cum`` with ``cum[0] == 0`` and
``cum[-1] == total``; symbol ``s`` owns ``[cum[s], cum[s + 1])``. Totals up to
2**16 are supported with the 32-bit state used here.
"""

from __future__ import annotations

from bisect import bisect_right
from typing import Sequence

STATE_BITS = 32
FULL = (1 << STATE_BITS) - 1
HALF = 1 << (STATE_BITS - 1)
QUARTER = 1 << (STATE_BITS - 2)
MAX_TOTAL = 1 << 16

# two-symbol table for equiprobable bits (escape payloads)
BYPASS = (0, 1, 2)


class BitWriter:
    def __init__(self):
        self._bytes = bytearray()
        self._acc = 0
        self._n = 0

    def write(self, bit: int) -> None:
        self._acc = (self._acc << 1) | bit
        self._n += 1
        if self._n == 8:
            self._bytes.append(self._acc)
            self._acc = 0
            self._n = 0

    def getvalue(self) -> bytes:
        out = bytearray(self._bytes)
        if self._n:
            out.append(self._acc << (8 - self._n))
        return bytes(out)


class BitReader:
    """Reads bits MSB first; past the end it yields zeros."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def read(self) -> int:
        byte_index = self._pos >> 3
        if byte_index >= len(self._data):
            self._pos += 1
            return 0
        bit = (self._data[byte_index] >> (7 - (self._pos & 7))) & 1
        self._pos += 1
        return bit


class ArithmeticEncoder:
    def __init__(self):
        self.low = 0
        self.high = FULL
        self.pending = 0
        self.out = BitWriter()

    def _emit(self, bit: int) -> None:
        self.out.write(bit)
        for _ in range(self.pending):
            self.out.write(bit ^ 1)
        self.pending = 0

    def encode(self, cum: Sequence[int], symbol: int) -> None:
        total = cum[-1]
        span = self.high - self.low + 1
        self.high = self.low + span * cum[symbol + 1] // total - 1
        self.low = self.low + span * cum[symbol] // total
        while True:
            if self.high < HALF:
                self._emit(0)
            elif self.low >= HALF:
                self._emit(1)
                self.low -= HALF
                self.high -= HALF
            elif self.low >= QUARTER and self.high < HALF + QUARTER:
                self.pending += 1
                self.low -= QUARTER
                self.high -= QUARTER
            else:
                break
            self.low <<= 1
            self.high = (self.high << 1) | 1

    def encode_bits(self, value: int, nbits: int) -> None:
        for i in reversed(range(nbits)):
            self.encode(BYPASS, (value >> i) & 1)

    def finish(self) -> bytes:
        # two disambiguating bits select a point inside [low, high]
        self.pending += 1
        self._emit(0 if self.low < QUARTER else 1)
        return self.out.getvalue()


class ArithmeticDecoder:
    def __init__(self, data: bytes):
        self.low = 0
        self.high = FULL
        self.inp = BitReader(data)
        self.code = 0
        for _ in range(STATE_BITS):
            self.code = (self.code << 1) | self.inp.read()

    def decode(self, cum: Sequence[int]) -> int:
        total = cum[-1]
        span = self.high - self.low + 1
        value = ((self.code - self.low + 1) * total - 1) // span
        symbol = bisect_right(cum, value) - 1
        self.high = self.low + span * cum[symbol + 1] // total - 1
        self.low = self.low + span * cum[symbol] // total
        while True:
            if self.high < HALF:
                pass
            elif self.low >= HALF:
                self.low -= HALF
                self.high -= HALF
                self.code -= HALF
            elif self.low >= QUARTER and self.high < HALF + QUARTER:
                self.low -= QUARTER
                self.high -= QUARTER
                self.code -= QUARTER
            else:
                break
            self.low <<= 1
            self.high = (self.high << 1) | 1
            self.code = (self.code << 1) | self.inp.read()
        return symbol

    def decode_bits(self, nbits: int) -> int:
        v = 0
        for _ in range(nbits):
            v = (v << 1) | self.decode(BYPASS)
        return v


def encode_exp_golomb(enc: ArithmeticEncoder, value: int) -> None:
    """Order-0 Exp-Golomb code of ``value >= 0`` with equiprobable bits."""
    v = value + 1
    n = v.bit_length()
    enc.encode_bits(0, n - 1)
    enc.encode_bits(v, n)


def decode_exp_golomb(dec: ArithmeticDecoder) -> int:
    zeros = 0
    while dec.decode(BYPASS) == 0:
        zeros += 1
        if zeros > 64:
            raise ValueError("corrupt escape code")
    v = 1
    for _ in range(zeros):
        v = (v << 1) | dec.decode(BYPASS)
    return v - 1


def pmf_to_cumulative(pmf, precision: int = 16) -> list[int]:
    """Quantize a probability vector to integer frequencies summing to 2**precision.

    Every symbol keeps a frequency of at least 1 so it stays codable.
    """
    total = 1 << precision
    n = len(pmf)
    if n == 0 or n > total:
        raise ValueError(f"cannot quantize {n} symbols to {precision} bits")
    if any(not (p >= 0) or p == float("inf") for p in pmf):
        raise ValueError("probabilities must be finite and non-negative")
    s = float(sum(pmf))
    if s == 0:
        pmf, s = [1.0] * n, float(n)
    freqs = [max(1, int(round(p / s * total))) for p in pmf]
    diff = total - sum(freqs)
    order = sorted(range(n), key=lambda i: freqs[i], reverse=True)
    i = 0
    while diff != 0:
        j = order[i % n]
        if diff > 0:
            freqs[j] += diff
            diff = 0
        elif freqs[j] > 1:
            take = min(freqs[j] - 1, -diff)
            freqs[j] -= take
            diff += take
        i += 1
    cum = [0]
    for f in freqs:
        cum.append(cum[-1] + f)
    return cum

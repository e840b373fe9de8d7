"""Byte-oriented range coder driven by :class:`QuantizedCDFTable`.

Carry-propagating design (pending ``0xFF`` run plus cache byte). The coder
state is ``STATE_BITS`` wide and renormalizes a byte at a time whenever the
range drops below ``2**(STATE_BITS - 8)``. Symbol intervals are
``(range >> precision) * count``.

Termination writes the fewest bytes that still pin a value inside the final
interval; the decoder reads zero bytes past the end of the stream.

Symbols are coded channel by channel: all values of channel 0 (in C order
of the remaining axes), then channel 1, and so on. A value outside a
channel's support is coded as the escape symbol followed by its 16-bit
two's complement as raw bits.
"""

from __future__ import annotations

from bisect import bisect_right

import numpy as np

from .entropy import QuantizedCDFTable

STATE_BITS = 64
RAW_BITS = 16
MAX_MAGNITUDE = (1 << (RAW_BITS - 1)) - 1


class RangeCoderError(ValueError):
    """Raised on unencodable input or a stream that cannot be decoded."""


class RangeEncoder:
    def __init__(self, state_bits: int = STATE_BITS):
        self.bits = state_bits
        self.mask = (1 << state_bits) - 1
        self.top = 1 << (state_bits - 8)
        self.carry_limit = 0xFF << (state_bits - 8)
        self.low = 0
        self.range = self.mask
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        low = self.low
        if low < self.carry_limit or low > self.mask:
            carry = low >> self.bits
            temp = self.cache
            out = self.out
            while True:
                out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (low >> (self.bits - 8)) & 0xFF
        self.cache_size += 1
        self.low = (low << 8) & self.mask

    def encode(self, start: int, freq: int, precision: int) -> None:
        r = self.range >> precision
        self.low += r * start
        self.range = r * freq
        while self.range < self.top:
            self.range <<= 8
            self._shift_low()

    def encode_raw(self, value: int, nbits: int = RAW_BITS) -> None:
        self.encode(value, 1, nbits)

    def finish(self) -> bytes:
        low, rng = self.low, self.range
        k = 0
        for k in range(self.bits // 8 + 1):
            unit = 1 << (self.bits - 8 * k)
            v = -(-low // unit) * unit
            if v < low + rng:
                break
        self.low = v
        for _ in range(k + 1):
            self._shift_low()
        # the first byte out is the initial cache, which never receives a carry
        return bytes(self.out[1:])


class RangeDecoder:
    def __init__(self, data: bytes, state_bits: int = STATE_BITS):
        self.bits = state_bits
        self.top = 1 << (state_bits - 8)
        self.data = data
        self.pos = 0
        self.padding = 0
        self.range = (1 << state_bits) - 1
        code = 0
        for _ in range(state_bits // 8):
            code = (code << 8) | self._next()
        self.code = code

    def _next(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
            self.pos += 1
            return b
        self.padding += 1
        if self.padding > self.bits // 8:
            raise RangeCoderError("stream underflow: read past the end of the payload")
        return 0

    def target(self, precision: int) -> int:
        r = self.range >> precision
        cum = self.code // r
        if cum >= (1 << precision):
            raise RangeCoderError("corrupt stream: code outside the coded interval")
        return cum

    def consume(self, start: int, freq: int, precision: int) -> None:
        r = self.range >> precision
        self.code -= r * start
        self.range = r * freq
        while self.range < self.top:
            self.range <<= 8
            self.code = (self.code << 8) | self._next()

    def decode_raw(self, nbits: int = RAW_BITS) -> int:
        value = self.target(nbits)
        self.consume(value, 1, nbits)
        return value


def _channel_rows(symbols: np.ndarray, table: QuantizedCDFTable) -> np.ndarray:
    symbols = np.asarray(symbols)
    if symbols.size == 0:
        return symbols.reshape(table.channels, 0).astype(np.int64)
    if symbols.shape[0] != table.channels:
        raise RangeCoderError(
            f"symbol array has {symbols.shape[0]} channels, table has {table.channels}"
        )
    if not np.issubdtype(symbols.dtype, np.integer):
        if not np.all(np.isfinite(symbols)) or np.any(symbols != np.round(symbols)):
            raise RangeCoderError("symbols must be finite integers")
    return symbols.astype(np.int64).reshape(table.channels, -1)


def range_encode(symbols, table: QuantizedCDFTable, state_bits: int = STATE_BITS) -> bytes:
    """Encode an integer array whose axis 0 is the channel axis of ``table``."""
    rows = _channel_rows(symbols, table)
    if rows.size and int(np.abs(rows).max()) > MAX_MAGNITUDE:
        raise RangeCoderError(f"symbol magnitude exceeds {MAX_MAGNITUDE}")
    enc = RangeEncoder(state_bits)
    prec = table.precision
    for c in range(table.channels):
        n = int(table.sizes[c])
        idx = rows[c] - table.offsets[c]
        esc = (idx < 0) | (idx >= n)
        idx = np.where(esc, n, idx)
        starts = table.cdf[c, idx].tolist()
        freqs = (table.cdf[c, idx + 1] - table.cdf[c, idx]).tolist()
        if esc.any():
            raws = (rows[c] & 0xFFFF).tolist()
            for s, f, e, raw in zip(starts, freqs, esc.tolist(), raws):
                enc.encode(s, f, prec)
                if e:
                    enc.encode_raw(raw)
        else:
            for s, f in zip(starts, freqs):
                enc.encode(s, f, prec)
    return enc.finish()


def range_decode(data: bytes, table: QuantizedCDFTable, n: int, state_bits: int = STATE_BITS) -> np.ndarray:
    """Decode ``n`` symbols in total; returns a ``(C, n // C)`` int64 array."""
    if n % table.channels:
        raise RangeCoderError(f"symbol count {n} is not a multiple of {table.channels} channels")
    n //= table.channels
    out = np.empty((table.channels, n), dtype=np.int64)
    if n == 0:
        return out
    dec = RangeDecoder(data, state_bits)
    prec = table.precision
    for c in range(table.channels):
        size = int(table.sizes[c])
        row = table.cdf[c, : size + 2].tolist()
        offset = int(table.offsets[c])
        vals = [0] * n
        for k in range(n):
            cum = dec.target(prec)
            i = bisect_right(row, cum) - 1
            dec.consume(row[i], row[i + 1] - row[i], prec)
            if i == size:
                raw = dec.decode_raw()
                vals[k] = raw - 0x10000 if raw & 0x8000 else raw
            else:
                vals[k] = i + offset
        out[c] = vals
    return out

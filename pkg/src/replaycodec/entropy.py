"""Discretized Gaussian model, fixed-point CDF tables and a byte-wise rANS coder.

Symbols are integer residuals ``q = round(z - mu)``.  Residuals in
[-64, 63] have their own bucket; anything else goes to an escape bucket
followed by a raw 16-bit sign-magnitude payload.  Encoder and decoder are
exact inverses as long as they see the same table and the same per-symbol
CDF indices.
"""

from __future__ import annotations

import functools
import math
import struct
from bisect import bisect_right
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr

PRECISION = 16
TOTAL = 1 << PRECISION
Q_MIN, Q_MAX = -64, 63
ALPHABET = Q_MAX - Q_MIN + 1  # 128 regular buckets
ESCAPE = ALPHABET  # bucket index of the escape symbol
RAW_BITS = 16
MAX_ESCAPE_MAGNITUDE = (1 << (RAW_BITS - 1)) - 1

RANS_L = 1 << 23  # lower bound of the normalisation interval
STATE_BYTES = 4


class EntropyCodingError(ValueError):
    """Raised for unencodable symbols or malformed streams."""


@dataclass(frozen=True)
class ScaleTable:
    entries: tuple
    precision: int = PRECISION

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 1 or len(e) == 0 or e[0] <= 0 or np.any(np.diff(e) <= 0):
            raise ValueError("scale table must be positive and strictly increasing")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.entries, dtype=np.float64)

    def to_bytes(self) -> bytes:
        return struct.pack(f"<BI{len(self.entries)}d", self.precision, len(self.entries), *self.entries)


@functools.lru_cache(maxsize=None)
def default_scale_table(count: int = 64, lo: float = 0.05, hi: float = 20.0) -> ScaleTable:
    entries = np.exp(np.linspace(math.log(lo), math.log(hi), count))
    entries[0], entries[-1] = lo, hi
    return ScaleTable(tuple(float(v) for v in entries))


def discretized_gaussian_pmf(q, sigma):
    """Mass of N(0, sigma^2) on [q - 0.5, q + 0.5]; accepts scalars or arrays."""
    sigma_arr = np.asarray(sigma, dtype=np.float64)
    if np.any(~(sigma_arr > 0)):
        raise ValueError(f"sigma must be positive, got {sigma}")
    a = np.abs(np.asarray(q, dtype=np.float64))
    p = ndtr((0.5 - a) / sigma_arr) - ndtr((-0.5 - a) / sigma_arr)
    return float(p) if np.ndim(p) == 0 else p


def sigma_to_index(sigma, table: ScaleTable):
    """Smallest table index whose entry is >= sigma, clamped to the table."""
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(np.isnan(s)):
        raise ValueError("sigma is NaN")
    idx = np.searchsorted(table.array, s, side="left")
    idx = np.minimum(idx, len(table) - 1)
    return int(idx) if np.ndim(idx) == 0 else idx.astype(np.int64)


@functools.lru_cache(maxsize=None)
def _cdf_matrix(table: ScaleTable) -> np.ndarray:
    rows = [_build_cdf(i, table) for i in range(len(table))]
    m = np.stack(rows)
    m.setflags(write=False)
    return m


def _build_cdf(index: int, table: ScaleTable) -> np.ndarray:
    sigma = table.entries[index]
    q = np.arange(Q_MIN, Q_MAX + 1)
    pmf = discretized_gaussian_pmf(q, sigma)
    tail = max(0.0, 1.0 - float(pmf.sum()))
    probs = np.append(pmf, tail)
    # one reserved count per bucket keeps every symbol codable; the rest is
    # shared in proportion to the mass, and the largest bucket absorbs the
    # rounding residue so the total is exact
    counts = 1 + np.rint(probs * (TOTAL - len(probs))).astype(np.int64)
    counts[int(np.argmax(counts))] += TOTAL - int(counts.sum())
    cdf = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=cdf[1:])
    return cdf


def build_cdf(index: int, table: ScaleTable) -> np.ndarray:
    """Cumulative counts (length 130) for the sigma bucket ``index``; total 2**16."""
    if not 0 <= index < len(table):
        raise IndexError(f"cdf index {index} outside [0, {len(table)})")
    return _cdf_matrix(table)[index].copy()


def cdf_table(table: ScaleTable) -> np.ndarray:
    """All CDFs as a read-only (len(table), 130) matrix."""
    return _cdf_matrix(table)


def _bucket(q: int) -> int:
    return q - Q_MIN if Q_MIN <= q <= Q_MAX else ESCAPE


def _escape_payload(q: int) -> int:
    mag = abs(q)
    if mag > MAX_ESCAPE_MAGNITUDE:
        raise EntropyCodingError(f"residual {q} exceeds the {RAW_BITS}-bit escape range")
    return ((1 << 15) if q < 0 else 0) | mag


class RansEncoder:
    """Byte-wise rANS with a 32-bit state.  Symbols must be pushed in reverse."""

    def __init__(self):
        self.state = RANS_L
        self._out = bytearray()

    def put(self, start: int, freq: int, precision: int = PRECISION) -> None:
        x = self.state
        x_max = ((RANS_L >> precision) << 8) * freq
        while x >= x_max:
            self._out.append(x & 0xFF)
            x >>= 8
        self.state = ((x // freq) << precision) + (x % freq) + start

    def finish(self) -> bytes:
        head = self.state.to_bytes(STATE_BYTES, "little")
        return head + bytes(reversed(self._out))


class RansDecoder:
    def __init__(self, data: bytes, strict: bool = True):
        if len(data) < STATE_BYTES:
            if strict:
                raise EntropyCodingError(f"stream too short: {len(data)} bytes")
            data = bytes(data) + bytes(STATE_BYTES - len(data))
        self.data = data
        self.strict = strict
        self.state = int.from_bytes(data[:STATE_BYTES], "little")
        self.pos = STATE_BYTES

    def peek(self, precision: int = PRECISION) -> int:
        return self.state & ((1 << precision) - 1)

    def advance(self, start: int, freq: int, precision: int = PRECISION) -> None:
        x = freq * (self.state >> precision) + (self.state & ((1 << precision) - 1)) - start
        data = self.data
        while x < RANS_L:
            if self.pos < len(data):
                b = data[self.pos]
            elif self.strict:
                raise EntropyCodingError(f"stream truncated at byte {self.pos}")
            else:
                b = 0
            x = (x << 8) | b
            self.pos += 1
        self.state = x

    def exhausted(self) -> bool:
        return self.pos >= len(self.data)


@functools.lru_cache(maxsize=None)
def _table_lists(table: ScaleTable) -> tuple:
    return tuple(list(map(int, row)) for row in _cdf_matrix(table))


def _as_lists(cdfs) -> Sequence[list]:
    if isinstance(cdfs, tuple):
        return cdfs
    return [list(map(int, c)) for c in cdfs]


def encode_with_cdfs(symbols: Sequence[int], rows: Sequence[int], cdfs) -> bytes:
    """rANS-encode ``symbols`` where symbol k uses ``cdfs[rows[k]]``."""
    if len(symbols) != len(rows):
        raise EntropyCodingError(f"{len(symbols)} symbols but {len(rows)} cdf indices")
    cdf_lists = _as_lists(cdfs)
    enc = RansEncoder()
    for q, r in zip(reversed(list(map(int, symbols))), reversed(list(map(int, rows)))):
        cdf = cdf_lists[r]
        b = _bucket(q)
        if b == ESCAPE:
            enc.put(_escape_payload(q), 1, RAW_BITS)
        start = cdf[b]
        enc.put(start, cdf[b + 1] - start)
    return enc.finish()


def decode_with_cdfs(data: bytes, rows: Sequence[int], cdfs, strict: bool = True) -> list[int]:
    cdf_lists = _as_lists(cdfs)
    dec = RansDecoder(data, strict=strict)
    out = []
    for r in map(int, rows):
        cdf = cdf_lists[r]
        slot = dec.peek()
        b = bisect_right(cdf, slot) - 1
        start = cdf[b]
        dec.advance(start, cdf[b + 1] - start)
        if b == ESCAPE:
            raw = dec.peek(RAW_BITS)
            dec.advance(raw, 1, RAW_BITS)
            mag = raw & 0x7FFF
            out.append(-mag if raw & 0x8000 else mag)
        else:
            out.append(b + Q_MIN)
    if strict and dec.pos != len(data):
        raise EntropyCodingError(f"{len(data) - dec.pos} unread bytes after decoding {len(out)} symbols")
    return out


def rans_encode(symbols: Sequence[int], cdf_indices: Sequence[int], table: ScaleTable) -> bytes:
    return encode_with_cdfs(symbols, cdf_indices, _table_lists(table))


def rans_decode(data: bytes, cdf_indices: Sequence[int], count: int, table: ScaleTable, strict: bool = True) -> list[int]:
    """Inverse of :func:`rans_encode`.  ``strict=False`` pads truncated input with zeros."""
    if count != len(cdf_indices):
        raise EntropyCodingError(f"count {count} != number of cdf indices {len(cdf_indices)}")
    return decode_with_cdfs(data, cdf_indices, _table_lists(table), strict=strict)


def symbol_bits(symbols, cdf_indices, cdfs: np.ndarray) -> np.ndarray:
    """Per-symbol ideal code length in bits under the fixed-point model."""
    q = np.asarray(symbols, dtype=np.int64)
    rows = np.asarray(cdf_indices, dtype=np.int64)
    buckets = np.where((q >= Q_MIN) & (q <= Q_MAX), q - Q_MIN, ESCAPE)
    counts = cdfs[rows, buckets + 1] - cdfs[rows, buckets]
    bits = PRECISION - np.log2(counts.astype(np.float64))
    return bits + np.where(buckets == ESCAPE, RAW_BITS, 0)


def estimate_bits(symbols, cdf_indices, table: ScaleTable) -> float:
    """Sum of -log2(count / 2**16) (plus 16 raw bits per escape)."""
    if len(symbols) == 0:
        return 0.0
    return float(symbol_bits(symbols, cdf_indices, cdf_table(table)).sum())

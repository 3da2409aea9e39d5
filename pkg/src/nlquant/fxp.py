"""Signed fixed-point arithmetic with floor shifts and saturation.

Two layers live here. ``FxValue`` is an immutable scalar carrying its own
sticky overflow bit, convenient for reasoning about single values. The
``*_raw`` helpers operate on int64 numpy arrays of raw codes and are what
the vectorized kernels in :mod:`nlquant.approxnl` are built from. Both
layers share the same semantics bit for bit:

* right shifts are arithmetic (floor, sign propagating);
* products are formed at double width and truncated (floor) by ``frac_bits``;
* anything outside the signed ``total_bits`` range saturates to the nearest
  extreme instead of wrapping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class FxError(ValueError):
    """Contract violation in fixed-point arithmetic (format mismatch, domain)."""


@dataclass(frozen=True)
class FxFormat:
    total_bits: int = 32
    frac_bits: int = 16

    def __post_init__(self):
        if not 0 < self.frac_bits < self.total_bits:
            raise FxError(
                f"need 0 < frac_bits < total_bits, got {self.frac_bits}/{self.total_bits}"
            )
        if self.total_bits > 62:
            # raw products of two values must fit an int64 after the >> frac_bits
            raise FxError("total_bits above 62 is not supported")

    @property
    def one(self) -> int:
        return 1 << self.frac_bits

    @property
    def min_raw(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def max_raw(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def ulp(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def max_value(self) -> float:
        return self.max_raw / self.one

    @property
    def min_value(self) -> float:
        return self.min_raw / self.one

    def __str__(self):
        return f"Q{self.total_bits - self.frac_bits}.{self.frac_bits}"


Q16_16 = FxFormat(32, 16)


@dataclass(frozen=True)
class FxValue:
    raw: int
    fmt: FxFormat = Q16_16
    overflow: bool = False

    def __post_init__(self):
        if not self.fmt.min_raw <= self.raw <= self.fmt.max_raw:
            raise FxError(f"raw {self.raw} does not fit {self.fmt}")

    @property
    def value(self) -> float:
        return self.raw / self.fmt.one

    def __float__(self):
        return self.value

    def __repr__(self):
        flag = ", overflow" if self.overflow else ""
        return f"FxValue({self.value!r} [{self.raw}] {self.fmt}{flag})"


def _saturate(raw: int, fmt: FxFormat) -> tuple[int, bool]:
    if raw > fmt.max_raw:
        return fmt.max_raw, True
    if raw < fmt.min_raw:
        return fmt.min_raw, True
    return raw, False


def _make(raw: int, fmt: FxFormat, *sources: FxValue) -> FxValue:
    raw, ovf = _saturate(raw, fmt)
    return FxValue(raw, fmt, ovf or any(s.overflow for s in sources))


def _check_fmt(a: FxValue, b: FxValue) -> FxFormat:
    if a.fmt != b.fmt:
        raise FxError(f"format mismatch: {a.fmt} vs {b.fmt}")
    return a.fmt


def round_half_away(v: float) -> int:
    """Round to nearest integer, ties away from zero."""
    r = math.floor(abs(v) + 0.5)
    return -r if v < 0 else r


def fx_from_real(v: float, fmt: FxFormat = Q16_16) -> FxValue:
    if not math.isfinite(v):
        raise FxError(f"cannot encode non-finite value {v}")
    return _make(round_half_away(v * fmt.one), fmt)


def fx_add(a: FxValue, b: FxValue) -> FxValue:
    return _make(a.raw + b.raw, _check_fmt(a, b), a, b)


def fx_sub(a: FxValue, b: FxValue) -> FxValue:
    return _make(a.raw - b.raw, _check_fmt(a, b), a, b)


def fx_shr(a: FxValue, n: int) -> FxValue:
    if n < 0:
        raise FxError("shift count must be non-negative")
    return FxValue(a.raw >> n, a.fmt, a.overflow)


def fx_shl(a: FxValue, n: int) -> FxValue:
    if n < 0:
        raise FxError("shift count must be non-negative")
    return _make(a.raw << n, a.fmt, a)


def fx_mul(a: FxValue, b: FxValue) -> FxValue:
    fmt = _check_fmt(a, b)
    return _make((a.raw * b.raw) >> fmt.frac_bits, fmt, a, b)


def fx_ceil_int(a: FxValue) -> int:
    return -((-a.raw) >> a.fmt.frac_bits)


def fx_msb_pos(a: FxValue) -> int:
    """floor(log2(value)) for a strictly positive value."""
    if a.raw <= 0:
        raise FxError(f"MSB position undefined for non-positive value {a.value}")
    return a.raw.bit_length() - 1 - a.fmt.frac_bits


# ---------------------------------------------------------------------------
# Vectorized raw-code helpers (int64 arrays, same semantics as above).
# ---------------------------------------------------------------------------


def sat_raw(raw: np.ndarray, fmt: FxFormat) -> tuple[np.ndarray, int]:
    """Clip raw codes to the format range; also return how many saturated."""
    raw = np.asarray(raw, dtype=np.int64)
    hit = (raw > fmt.max_raw) | (raw < fmt.min_raw)
    n = int(np.count_nonzero(hit))
    if n:
        raw = np.clip(raw, fmt.min_raw, fmt.max_raw)
    return raw, n


def mul_raw(a, b, fmt: FxFormat) -> np.ndarray:
    """Truncating fixed-point product; operands must already be in range."""
    return (np.asarray(a, dtype=np.int64) * np.asarray(b, dtype=np.int64)) >> fmt.frac_bits


def ceil_int_raw(raw, fmt: FxFormat) -> np.ndarray:
    return -((-np.asarray(raw, dtype=np.int64)) >> fmt.frac_bits)


def bit_length_raw(raw) -> np.ndarray:
    """Bit length of non-negative int64 codes (0 for 0), by binary search."""
    v = np.asarray(raw, dtype=np.int64).copy()
    n = np.zeros(v.shape, dtype=np.int64)
    for step in (32, 16, 8, 4, 2, 1):
        big = v >= (np.int64(1) << step)
        n += np.where(big, step, 0)
        v = np.where(big, v >> step, v)
    return n + (v > 0)


def msb_pos_raw(raw, fmt: FxFormat) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.int64)
    if np.any(raw <= 0):
        raise FxError("MSB position undefined for non-positive values")
    return bit_length_raw(raw) - 1 - fmt.frac_bits


def shift_raw(raw, n) -> np.ndarray:
    """Shift left by n where n > 0, arithmetic right by -n where n < 0.

    No saturation; callers that can grow the value clip afterwards.
    """
    raw = np.asarray(raw, dtype=np.int64)
    n = np.asarray(n, dtype=np.int64)
    right = np.minimum(np.maximum(-n, 0), 63)
    left = np.minimum(np.maximum(n, 0), 62)
    return np.where(n >= 0, raw << left, raw >> right)


def to_raw(values, fmt: FxFormat = Q16_16) -> tuple[np.ndarray, int]:
    """Encode real values (round half away from zero), saturating."""
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise FxError("cannot encode non-finite values")
    scaled = v * fmt.one
    r = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    r = np.clip(r, fmt.min_raw - 1, fmt.max_raw + 1).astype(np.int64)
    return sat_raw(r, fmt)


def from_raw(raw, fmt: FxFormat = Q16_16) -> np.ndarray:
    return np.asarray(raw, dtype=np.int64) / fmt.one

"""Integer-only Softmax, GELU and LayerNorm built from shared exp/ln units.

Every kernel has two entry points:

* a vectorized ``*_raw`` function over int64 arrays of fixed-point codes,
  which is what sweeps and the block simulator use;
* a scalar / list wrapper over :class:`~nlquant.fxp.FxValue`.

The scalar wrappers call the raw kernels, so both paths are bit identical.

Nothing in this module divides at run time. Base conversions are shift-add
chains (log2(e) ~ 1.0111b, ln 2 ~ 0.1011b, 1.702 ~ 1.101101b), the integer
exponent of 2 is applied as a shift, and quotients go through
``exp(ln a - ln b)``. The only multiplies are the Horner steps of the two
second-order polynomials, the final GELU product, and LayerNorm's squares
and reciprocal-constant products.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .fxp import (
    FxError,
    FxFormat,
    FxValue,
    Q16_16,
    bit_length_raw,
    ceil_int_raw,
    fx_from_real,
    msb_pos_raw,
    mul_raw,
    sat_raw,
    shift_raw,
)

EXP_COEFFS = (0.1713, 0.6674, 0.998)  # 2**f on (-1, 0], highest degree first
LOG_COEFFS = (-0.3369, 1.995, -1.65)  # log2(q) on [1, 2)
GELU_GAIN_SHIFTS = (0, 1, 3, 4, 6)  # 1 + 1/2 + 1/8 + 1/16 + 1/64 = 1.703125
RELU_BOUNDARY = 2.4
MAX_NEWTON_ITERS = 10
RECIP_BITS = 32  # fractional bits of the LayerNorm 1/n constant

KERNELS = ("exp", "ln", "softmax", "sigmoid", "gelu", "isqrt", "layernorm")


@dataclass
class OpCounter:
    """Census of primitive operations issued by a kernel invocation.

    ``divides`` exists so reports can state the count; no kernel increments it.
    """

    adds: int = 0
    shifts: int = 0
    mults: int = 0
    compares: int = 0
    divides: int = 0
    iterations: int = 0
    saturations: int = 0
    degenerate: int = 0

    def tally(self, n: int, adds=0, shifts=0, mults=0, compares=0):
        self.adds += n * adds
        self.shifts += n * shifts
        self.mults += n * mults
        self.compares += n * compares

    def merge(self, other: "OpCounter") -> "OpCounter":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class ExpLnConstants:
    fmt: FxFormat = Q16_16
    exp_poly: tuple = field(init=False)
    log_poly: tuple = field(init=False)

    def __post_init__(self):
        enc = lambda cs: tuple(fx_from_real(c, self.fmt).raw for c in cs)  # noqa: E731
        object.__setattr__(self, "exp_poly", enc(EXP_COEFFS))
        object.__setattr__(self, "log_poly", enc(LOG_COEFFS))


@dataclass(frozen=True)
class GeluConfig:
    fmt: FxFormat = Q16_16
    relu_boundary: int = field(init=False)
    gain_shifts: tuple = GELU_GAIN_SHIFTS

    def __post_init__(self):
        object.__setattr__(self, "relu_boundary", fx_from_real(RELU_BOUNDARY, self.fmt).raw)

    @property
    def gain(self) -> float:
        return sum(2.0 ** -s for s in self.gain_shifts)


_CONSTS: dict = {}


def _consts(fmt: FxFormat) -> ExpLnConstants:
    c = _CONSTS.get(fmt)
    if c is None:
        c = _CONSTS[fmt] = ExpLnConstants(fmt)
    return c


def _horner(coeffs, q, fmt: FxFormat, counter: OpCounter):
    c2, c1, c0 = coeffs
    p = mul_raw(mul_raw(c2, q, fmt) + c1, q, fmt) + c0
    counter.tally(q.size, adds=2, mults=2)
    return p


def _sat(raw, fmt, counter):
    raw, n = sat_raw(raw, fmt)
    counter.saturations += n
    return raw


# ---------------------------------------------------------------------------
# Shared sub-operators
# ---------------------------------------------------------------------------


def exp_raw(x, fmt: FxFormat = Q16_16, counter: OpCounter | None = None, extended=False):
    """Approximate e**x on raw codes.

    The Softmax path only ever sees x <= 0; ``extended=True`` admits positive
    exponents (LayerNorm's log-division) and turns the final shift into a
    saturating left shift.
    """
    counter = counter if counter is not None else OpCounter()
    x = np.asarray(x, dtype=np.int64)
    if not extended and np.any(x > 0):
        raise FxError("exp kernel expects non-positive input (subtract the max first)")
    f = fmt.frac_bits
    xs = _sat(x + (x >> 1) - (x >> 4), fmt, counter)  # x * 1.0111b
    q_int = ceil_int_raw(xs, fmt)
    q_frac = xs - (q_int << f)  # in (-1, 0]
    p = _horner(_consts(fmt).exp_poly, q_frac, fmt, counter)
    # p < 1.0, so any right shift >= frac_bits already yields 0
    q_int = np.minimum(q_int, fmt.total_bits)
    out = _sat(shift_raw(p, q_int), fmt, counter)
    counter.tally(x.size, adds=3, shifts=4, compares=1)
    return out


def ln_raw(x, fmt: FxFormat = Q16_16, counter: OpCounter | None = None):
    """Approximate ln(x) on strictly positive raw codes."""
    counter = counter if counter is not None else OpCounter()
    x = np.asarray(x, dtype=np.int64)
    if np.any(x <= 0):
        raise FxError("ln kernel requires strictly positive input")
    f = fmt.frac_bits
    q_msb = msb_pos_raw(x, fmt)
    q_norm = shift_raw(x, -q_msb)  # in [1, 2)
    log2 = (q_msb << f) + _horner(_consts(fmt).log_poly, q_norm, fmt, counter)
    out = _sat(log2 - (log2 >> 2) - (log2 >> 4), fmt, counter)  # * 0.1011b
    counter.tally(x.size, adds=3, shifts=4, compares=1)
    return out


def div_raw(a, b, fmt: FxFormat = Q16_16, counter: OpCounter | None = None):
    """a / b for positive codes as exp(ln a - ln b)."""
    counter = counter if counter is not None else OpCounter()
    d = _sat(ln_raw(a, fmt, counter) - ln_raw(b, fmt, counter), fmt, counter)
    counter.tally(d.size, adds=1)
    return exp_raw(d, fmt, counter, extended=True)


# ---------------------------------------------------------------------------
# Softmax / sigmoid / GELU
# ---------------------------------------------------------------------------


def softmax_raw(x, fmt: FxFormat = Q16_16, counter: OpCounter | None = None):
    """Division-free softmax over the last axis."""
    counter = counter if counter is not None else OpCounter()
    x = np.asarray(x, dtype=np.int64)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise FxError("softmax needs a non-empty vector")
    n = x.shape[-1]
    rows = math.prod(x.shape[:-1])
    x_max = x.max(axis=-1, keepdims=True)
    counter.tally(rows, compares=n - 1)
    shifted = _sat(x - x_max, fmt, counter)
    counter.tally(x.size, adds=1)
    e = exp_raw(shifted, fmt, counter)
    total = _sat(e.sum(axis=-1, keepdims=True), fmt, counter)
    counter.tally(rows, adds=n - 1)
    log_total = ln_raw(total, fmt, counter)
    # a lone surviving term sums to 0.998 < 1, so ln can dip just below 0
    arg = np.minimum(_sat(shifted - log_total, fmt, counter), 0)
    counter.tally(x.size, adds=1, compares=1)
    return exp_raw(arg, fmt, counter)


def sigmoid_raw(z, fmt: FxFormat = Q16_16, counter: OpCounter | None = None):
    """sigma(z) as the first output of a two-way softmax over [0, -z]."""
    counter = counter if counter is not None else OpCounter()
    z = np.asarray(z, dtype=np.int64)
    neg = _sat(-z, fmt, counter)
    pair = np.stack([np.zeros_like(z), neg], axis=-1)
    return softmax_raw(pair, fmt, counter)[..., 0]


def gelu_raw(x, fmt: FxFormat = Q16_16, counter: OpCounter | None = None,
             config: GeluConfig | None = None):
    """Hybrid GELU: ReLU outside (-2.4, 2.4), x * sigma(1.702 x) inside."""
    counter = counter if counter is not None else OpCounter()
    config = config or GeluConfig(fmt)
    x = np.asarray(x, dtype=np.int64)
    hi = x >= config.relu_boundary
    lo = x <= -config.relu_boundary
    mid = ~(hi | lo)
    counter.tally(x.size, compares=2)
    out = np.where(hi, x, 0)
    xm = x[mid]
    if xm.size:
        z = sum(xm >> s for s in config.gain_shifts)
        counter.tally(xm.size, adds=len(config.gain_shifts) - 1, shifts=len(config.gain_shifts) - 1)
        z = _sat(z, fmt, counter)
        out[mid] = _sat(mul_raw(xm, sigmoid_raw(z, fmt, counter), fmt), fmt, counter)
        counter.tally(xm.size, mults=1)
    return out


# ---------------------------------------------------------------------------
# Square root and LayerNorm
# ---------------------------------------------------------------------------


def isqrt_raw(var, fmt: FxFormat = Q16_16, counter: OpCounter | None = None,
              max_iter: int = MAX_NEWTON_ITERS):
    """Newton square root with log-division, vectorized over ``var``.

    Returns ``(root, iterations)``. Zero variances (below one ulp) give a
    root of 0 and bump ``counter.degenerate``.
    """
    counter = counter if counter is not None else OpCounter()
    var = np.atleast_1d(np.asarray(var, dtype=np.int64))
    if np.any(var < 0):
        raise FxError("square root of a negative variance")
    degenerate = var == 0
    counter.degenerate += int(np.count_nonzero(degenerate))
    v = np.where(degenerate, fmt.one, var)
    bits = bit_length_raw(v) - fmt.frac_bits  # msb position + 1
    x = shift_raw(np.full_like(v, fmt.one), bits >> 1)
    counter.tally(v.size, shifts=2, compares=1)
    ln_v = ln_raw(v, fmt, counter)

    iters = np.zeros(v.shape, dtype=np.int64)
    active = np.flatnonzero(~degenerate)
    for _ in range(max_iter):
        if active.size == 0:
            break
        xa = x[active]
        d = _sat(ln_v[active] - ln_raw(xa, fmt, counter), fmt, counter)
        q = exp_raw(d, fmt, counter, extended=True)
        nxt = np.maximum(_sat(xa + q, fmt, counter) >> 1, 1)
        counter.tally(active.size, adds=2, shifts=1, compares=2)
        x[active] = nxt
        iters[active] += 1
        active = active[np.abs(nxt - xa) > 1]
    counter.iterations += int(iters.sum())
    return np.where(degenerate, 0, x), iters


def reciprocal_constant(n: int) -> int:
    """1/n with RECIP_BITS fractional bits.

    n is a static model dimension, so this is evaluated offline, never in
    the kernel datapath.
    """
    return ((1 << RECIP_BITS) + n // 2) // n


def _row_sums(rows: np.ndarray):
    n = rows.shape[-1]
    peak = int(np.abs(rows).max(initial=0))
    if peak.bit_length() * 2 + n.bit_length() < 63:
        s1 = rows.sum(axis=-1)
        s2 = (rows * rows).sum(axis=-1)
        return [int(v) for v in s1], [int(v) for v in s2]
    big = rows.astype(object)
    return list(big.sum(axis=-1)), list((big * big).sum(axis=-1))


def layernorm_raw(x, fmt: FxFormat = Q16_16, counter: OpCounter | None = None):
    """Division-free LayerNorm (no affine) over the last axis.

    One pass gathers sum(x) and sum(x**2) in wide accumulators; the mean and
    E[x**2] use a precomputed 1/n constant; the variance goes through
    :func:`isqrt_raw`; each centred value is divided by the root with the
    log-division, sign split off first. Rows with zero variance are all 0.
    """
    counter = counter if counter is not None else OpCounter()
    x = np.asarray(x, dtype=np.int64)
    if x.ndim == 0 or x.shape[-1] < 2:
        raise FxError("layernorm needs at least two elements")
    n = x.shape[-1]
    rows = x.reshape(-1, n)
    f = fmt.frac_bits
    recip = reciprocal_constant(n)

    s1, s2 = _row_sums(rows)
    counter.tally(rows.size, adds=2, mults=1)
    mean = [(a * recip) >> RECIP_BITS for a in s1]
    ex2 = [(b * recip) >> (RECIP_BITS + f) for b in s2]
    var = [max(e - ((m * m) >> f), 0) for m, e in zip(mean, ex2)]
    counter.tally(len(s1), adds=1, shifts=3, mults=3, compares=1)
    # |mean| <= max|x| and var <= max(x**2), both well inside int64
    mean = _sat(np.array(mean, dtype=np.int64), fmt, counter)
    var = _sat(np.array(var, dtype=np.int64), fmt, counter)

    sigma, _ = isqrt_raw(var, fmt, counter)
    centred = _sat(rows - mean[:, None], fmt, counter)
    counter.tally(rows.size, adds=1)
    mag = np.abs(centred)
    live = (mag > 0) & (sigma[:, None] > 0)
    counter.tally(rows.size, compares=2)

    out = np.zeros_like(rows)
    if np.any(live):
        ln_sigma = np.zeros_like(sigma)
        ok = sigma > 0
        ln_sigma[ok] = ln_raw(sigma[ok], fmt, counter)
        r, c = np.nonzero(live)
        d = _sat(ln_raw(mag[r, c], fmt, counter) - ln_sigma[r], fmt, counter)
        q = exp_raw(d, fmt, counter, extended=True)
        out[r, c] = np.where(centred[r, c] < 0, -q, q)
        counter.tally(r.size, adds=2)
    return out.reshape(x.shape)


# ---------------------------------------------------------------------------
# FxValue wrappers
# ---------------------------------------------------------------------------


def _fmt_of(values: Sequence[FxValue]) -> FxFormat:
    fmts = {v.fmt for v in values}
    if len(fmts) != 1:
        raise FxError(f"mixed formats: {sorted(map(str, fmts))}")
    return fmts.pop()


def _wrap(raws, fmt, counter, before):
    ovf = counter.saturations > before
    return [FxValue(int(r), fmt, ovf) for r in np.ravel(raws)]


def _scalar(kernel, x: FxValue, counter: OpCounter | None, **kw) -> FxValue:
    counter = counter if counter is not None else OpCounter()
    before = counter.saturations
    out = kernel(np.array([x.raw], dtype=np.int64), x.fmt, counter, **kw)
    return _wrap(out, x.fmt, counter, before)[0]


def appro_exp(x: FxValue, counters: OpCounter | None = None, extended=False) -> FxValue:
    return _scalar(exp_raw, x, counters, extended=extended)


def appro_ln(x: FxValue, counters: OpCounter | None = None) -> FxValue:
    return _scalar(ln_raw, x, counters)


def sigmoid_int(z: FxValue, counters: OpCounter | None = None) -> FxValue:
    return _scalar(sigmoid_raw, z, counters)


def gelu_int(x: FxValue, counters: OpCounter | None = None,
             config: GeluConfig | None = None) -> FxValue:
    return _scalar(gelu_raw, x, counters, config=config)


def newton_isqrt(var: FxValue, counters: OpCounter | None = None) -> FxValue:
    counters = counters if counters is not None else OpCounter()
    before = counters.saturations
    root, _ = isqrt_raw(np.array([var.raw]), var.fmt, counters)
    return _wrap(root, var.fmt, counters, before)[0]


def softmax_int(x: Sequence[FxValue], counters: OpCounter | None = None) -> list[FxValue]:
    if len(x) == 0:
        raise FxError("softmax needs a non-empty vector")
    counters = counters if counters is not None else OpCounter()
    fmt = _fmt_of(x)
    before = counters.saturations
    out = softmax_raw(np.array([v.raw for v in x], dtype=np.int64), fmt, counters)
    return _wrap(out, fmt, counters, before)


def layernorm_int(x: Sequence[FxValue], counters: OpCounter | None = None) -> list[FxValue]:
    if len(x) < 2:
        raise FxError("layernorm needs at least two elements")
    counters = counters if counters is not None else OpCounter()
    fmt = _fmt_of(x)
    before = counters.saturations
    out = layernorm_raw(np.array([v.raw for v in x], dtype=np.int64), fmt, counters)
    return _wrap(out, fmt, counters, before)


# ---------------------------------------------------------------------------
# Census
# ---------------------------------------------------------------------------


def canonical_input(kernel: str, size: int, fmt: FxFormat = Q16_16) -> np.ndarray:
    """Deterministic raw input used by :func:`op_census`."""
    if size < 1:
        raise ValueError("size must be positive")
    if kernel in ("exp",):
        vals = -np.linspace(0.0, 8.0, size)
    elif kernel in ("ln", "isqrt"):
        vals = np.linspace(1.0, 128.0, size)
    elif kernel in ("gelu", "sigmoid"):
        vals = np.linspace(-4.0, 4.0, size)
    elif kernel in ("softmax", "layernorm"):
        rng = np.random.default_rng(0)
        vals = rng.integers(-128, 128, size).astype(np.float64)
    else:
        raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")
    return np.array([fx_from_real(v, fmt).raw for v in vals], dtype=np.int64)


def op_census(kernel: str, size: int, x=None, fmt: FxFormat = Q16_16) -> OpCounter:
    """Run ``kernel`` once over ``size`` elements and return its operation counts.

    ``x`` overrides the canonical input with explicit raw codes.
    """
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")
    raw = canonical_input(kernel, size, fmt) if x is None else np.asarray(x, dtype=np.int64)
    counter = OpCounter()
    if kernel == "exp":
        exp_raw(raw, fmt, counter)
    elif kernel == "ln":
        ln_raw(raw, fmt, counter)
    elif kernel == "softmax":
        softmax_raw(raw, fmt, counter)
    elif kernel == "sigmoid":
        sigmoid_raw(raw, fmt, counter)
    elif kernel == "gelu":
        gelu_raw(raw, fmt, counter)
    elif kernel == "isqrt":
        isqrt_raw(raw, fmt, counter)
    else:
        layernorm_raw(raw, fmt, counter)
    return counter

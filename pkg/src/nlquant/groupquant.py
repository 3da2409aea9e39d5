"""Reorder-based group quantization with power-of-two group scales.

Channels are sorted by calibration max-abs and cut into contiguous groups.
Group ``i`` quantizes with step ``2**k[i] * base_scale`` where the reference
group (smallest scale) has ``k = 0``. Because every ``k`` is non-negative,
codes from different groups are brought onto the reference grid with plain
left shifts and summed without rounding.

Conventions: activations are row vectors, ``y = x @ W``. A permutation
``perm`` reorders channels as ``x[..., perm]``; the equivalent permutation
matrix ``R`` has ``R[perm[j], j] = 1`` so that ``x @ R == x[..., perm]``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

ACC_BITS = 64  # width of the alignment accumulator
FLOOR_MAGNITUDE = 2.0 ** -16  # stands in for all-zero calibration groups
SNAP_MODES = ("mse", "nearest", "ceil")


@dataclass(frozen=True, eq=False)
class GroupPlan:
    permutation: np.ndarray
    group_bounds: np.ndarray
    bits: int = 8
    base_scale: float | None = None
    k: np.ndarray | None = None

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.int64)
        bounds = np.asarray(self.group_bounds, dtype=np.int64)
        object.__setattr__(self, "permutation", perm)
        object.__setattr__(self, "group_bounds", bounds)
        c = perm.size
        if not np.array_equal(np.sort(perm), np.arange(c)):
            raise ValueError("permutation must be a bijection on [0, C)")
        if bounds.size < 2 or bounds[0] != 0 or bounds[-1] != c or np.any(np.diff(bounds) <= 0):
            raise ValueError(f"group bounds {bounds.tolist()} do not partition [0, {c})")
        if self.bits < 2:
            raise ValueError("need at least 2 bits")
        if self.k is not None:
            k = np.asarray(self.k, dtype=np.int64)
            object.__setattr__(self, "k", k)
            if k.size != self.n_groups:
                raise ValueError("one shift exponent per group required")
            if np.any(k < 0):
                raise ValueError("shift exponents must be non-negative")
            if self.base_scale is None or not self.base_scale > 0:
                raise ValueError("base scale must be positive")

    @property
    def n_channels(self) -> int:
        return self.permutation.size

    @property
    def n_groups(self) -> int:
        return self.group_bounds.size - 1

    @property
    def q_max(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @property
    def has_scales(self) -> bool:
        return self.k is not None

    def _need_scales(self):
        if not self.has_scales:
            raise ValueError("plan has no scales yet; see compute_group_scales")

    @property
    def scales(self) -> np.ndarray:
        """Per-group step sizes 2**k * base_scale."""
        self._need_scales()
        return np.ldexp(self.base_scale, self.k)

    @property
    def thresholds(self) -> np.ndarray:
        return self.scales * self.q_max

    @property
    def channel_group(self) -> np.ndarray:
        """Group index of each position in permuted channel order."""
        return np.repeat(np.arange(self.n_groups), np.diff(self.group_bounds))

    @property
    def inverse_permutation(self) -> np.ndarray:
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(self.n_channels)
        return inv

    def with_scales(self, base_scale: float, k, bits: int | None = None) -> "GroupPlan":
        return replace(self, base_scale=float(base_scale), k=np.asarray(k, dtype=np.int64),
                       bits=self.bits if bits is None else bits)

    def to_dict(self) -> dict:
        return {
            "permutation": self.permutation.tolist(),
            "group_bounds": self.group_bounds.tolist(),
            "bits": self.bits,
            "base_scale": self.base_scale,
            "k": None if self.k is None else self.k.tolist(),
            "thresholds": None if self.k is None else self.thresholds.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupPlan":
        return cls(d["permutation"], d["group_bounds"], d.get("bits", 8),
                   d.get("base_scale"), d.get("k"))


@dataclass(frozen=True, eq=False)
class QuantizedGroupTensor:
    codes: np.ndarray  # permuted channel order
    plan: GroupPlan


def _max_abs(stats) -> np.ndarray:
    if hasattr(stats, "max_abs"):
        return np.asarray(stats.max_abs, dtype=np.float64)
    arr = np.asarray(stats)
    if arr.dtype == object:
        return np.array([s.max_abs for s in stats], dtype=np.float64)
    return arr.astype(np.float64)


def equal_bounds(n_channels: int, n_groups: int) -> np.ndarray:
    """Equal contiguous groups; the last one absorbs the remainder."""
    if n_groups < 1:
        raise ValueError("n_groups must be >= 1")
    if n_groups > n_channels:
        raise ValueError(f"cannot split {n_channels} channels into {n_groups} groups")
    size = n_channels // n_groups
    bounds = np.arange(n_groups + 1, dtype=np.int64) * size
    bounds[-1] = n_channels
    return bounds


def build_permutation(stats, n_groups: int, bounds=None, bits: int = 8) -> GroupPlan:
    """Sort channels by max-abs (ascending, stable) and partition them.

    ``stats`` is anything exposing per-channel ``max_abs`` (a
    :class:`~nlquant.calib.LayerStats`, a list of channel stats) or a plain
    array of max-abs values. The returned plan has no scales yet.
    """
    max_abs = _max_abs(stats)
    perm = np.argsort(max_abs, kind="stable")
    if bounds is None:
        bounds = equal_bounds(max_abs.size, n_groups)
    elif len(bounds) - 1 != n_groups:
        raise ValueError("explicit bounds disagree with n_groups")
    return GroupPlan(perm, bounds, bits)


def permutation_matrix(perm) -> np.ndarray:
    perm = np.asarray(perm)
    r = np.zeros((perm.size, perm.size))
    r[perm, np.arange(perm.size)] = 1.0
    return r


def fuse_permutation(weight, bias, perm):
    """Fold the reorder into the producing layer: returns (W @ R, b @ R)."""
    weight = np.asarray(weight)
    perm = np.asarray(perm)
    if weight.shape[-1] != perm.size:
        raise ValueError(f"weight has {weight.shape[-1]} output columns, permutation {perm.size}")
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape[-1] != perm.size:
            raise ValueError("bias length does not match permutation")
        bias = bias[..., perm]
    return weight[..., perm], bias


def fuse_inverse(weight, perm) -> np.ndarray:
    """Fold R^-1 = R^T into the consuming layer: returns R^T @ W."""
    weight = np.asarray(weight)
    perm = np.asarray(perm)
    if weight.shape[0] != perm.size:
        raise ValueError(f"weight has {weight.shape[0]} input rows, permutation {perm.size}")
    return weight[perm]


def compute_group_scales(magnitudes, bits: int, snap: str = "nearest"):
    """Snap per-group clip magnitudes to power-of-two multiples of a base step.

    Returns ``(base_scale, k)`` with ``k = 0`` on the smallest-scale group.
    ``snap="nearest"`` rounds ``log2(raw / base)`` to nearest, ties to the
    coarser scale; a group whose k rounds down then clamps up to ~29% of its
    range. ``snap="ceil"`` rounds up, so no group's range shrinks.
    """
    if snap not in ("nearest", "ceil"):
        raise ValueError(f"snap must be 'nearest' or 'ceil', got {snap!r}")
    raw = _raw_scales(magnitudes, bits)
    base = raw.min()
    ratio = np.log2(raw / base)
    if snap == "nearest":
        return float(base), np.floor(ratio + 0.5).astype(np.int64)
    return float(base), _ceil_log2(raw / base)


def _raw_scales(magnitudes, bits):
    mags = np.asarray(magnitudes, dtype=np.float64)
    if mags.size == 0:
        raise ValueError("no groups")
    if not np.all(np.isfinite(mags)):
        raise ValueError("non-finite group magnitude")
    mags = np.where(mags > 0, mags, FLOOR_MAGNITUDE)
    return mags / ((1 << (bits - 1)) - 1)


def _ceil_log2(ratio):
    # log2 of an exact power of two can land a hair above the integer
    return np.ceil(np.log2(ratio) - 1e-12).astype(np.int64)


def _mse_snap(flat, skeleton: GroupPlan, magnitudes):
    """Data-aware snapping: choose the base offset and each group's k.

    Every group's raw scale is tried as the anchor of the power-of-two grid
    (the base slides within one octave below the smallest raw scale). For a
    given anchor each group independently takes the floor or ceil exponent,
    whichever reconstructs its calibration values with less squared error.
    """
    q_max = skeleton.q_max
    raw = _raw_scales(magnitudes, skeleton.bits)
    b = skeleton.group_bounds
    cols = flat[:, skeleton.permutation]
    parts = [cols[:, b[i]:b[i + 1]] for i in range(skeleton.n_groups)]

    def sq_err(x, step):
        return float(np.sum((_quantize(x, step, step * q_max, q_max) * step - x) ** 2))

    best = None
    for anchor in raw:
        base = anchor * 2.0 ** -_ceil_log2(anchor / raw.min())
        ks, total = [], 0.0
        for part, r in zip(parts, raw):
            hi = int(_ceil_log2(r / base))
            options = {hi, max(hi - 1, 0)}
            err, k = min((sq_err(part, base * 2.0 ** k), -k) for k in options)
            ks.append(-k)
            total += err
        ks = np.array(ks, dtype=np.int64)
        if best is None or total < best[0]:
            best = (total, base * 2.0 ** ks.min(), ks - ks.min())
    return float(best[1]), best[2]


def group_magnitudes(x, plan: GroupPlan, percentile: float = 99.9) -> np.ndarray:
    """Per-group clip magnitude: percentile of |x| over the group's channels."""
    xp = np.abs(np.asarray(x, dtype=np.float64)[..., plan.permutation])
    xp = xp.reshape(-1, plan.n_channels)
    b = plan.group_bounds
    return np.array([np.percentile(xp[:, b[i]:b[i + 1]], percentile) for i in range(plan.n_groups)])


def fit_plan(x, n_groups: int, bits: int = 8, percentile: float = 99.9, bounds=None,
             snap: str = "mse") -> GroupPlan:
    """Calibrate a complete plan from samples shaped (..., C).

    ``snap`` picks how group scales land on the power-of-two grid: ``"mse"``
    (default) searches the grid against the calibration data itself, while
    ``"nearest"`` and ``"ceil"`` use the clip magnitudes alone
    (see :func:`compute_group_scales`).
    """
    if snap not in SNAP_MODES:
        raise ValueError(f"snap must be one of {SNAP_MODES}, got {snap!r}")
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    skeleton = build_permutation(np.abs(flat).max(axis=0), n_groups, bounds, bits)
    mags = group_magnitudes(flat, skeleton, percentile)
    if snap == "mse":
        base, k = _mse_snap(flat, skeleton, mags)
    else:
        base, k = compute_group_scales(mags, bits, snap)
    return skeleton.with_scales(base, k)


def _quantize(x, step, threshold, q_max):
    codes = np.floor(x / step + 0.5)
    codes = np.where(np.abs(x) <= threshold, codes, np.sign(x) * q_max)
    return codes.astype(np.int64)


def quantize_group_tensor(x, plan: GroupPlan, prepermuted: bool = False) -> QuantizedGroupTensor:
    """Uniform quantization inside each group, outliers pinned to +-q_max.

    ``x`` is in original channel order unless ``prepermuted`` (the reorder
    has already been fused upstream).
    """
    plan._need_scales()
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != plan.n_channels:
        raise ValueError(f"tensor has {x.shape[-1]} channels, plan covers {plan.n_channels}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values cannot be quantized")
    if not prepermuted:
        x = x[..., plan.permutation]
    g = plan.channel_group
    codes = _quantize(x, plan.scales[g], plan.thresholds[g], plan.q_max)
    return QuantizedGroupTensor(codes, plan)


def dequantize_group_tensor(q: QuantizedGroupTensor, original_order: bool = True) -> np.ndarray:
    plan = q.plan
    vals = q.codes * plan.scales[plan.channel_group]
    return vals[..., plan.inverse_permutation] if original_order else vals


def quantize_per_tensor(x, threshold: float, bits: int) -> np.ndarray:
    """Plain symmetric uniform quantizer with one step for the whole tensor."""
    q_max = (1 << (bits - 1)) - 1
    return _quantize(np.asarray(x, dtype=np.float64), threshold / q_max, threshold, q_max)


def aligned_codes(q: QuantizedGroupTensor) -> np.ndarray:
    """Codes shifted onto the reference grid (units of base_scale)."""
    shifts = q.plan.k[q.plan.channel_group]
    return q.codes << shifts


def align_accumulate(codes, plan: GroupPlan):
    """Sum ``(code, group)`` pairs exactly in units of the reference step.

    Returns ``(total, base_scale)``; ``total * base_scale`` is the real sum.
    """
    plan._need_scales()
    lim = 1 << (ACC_BITS - 1)
    acc = 0
    for code, group in codes:
        acc += int(code) << int(plan.k[group])
        if not -lim <= acc < lim:
            raise OverflowError(f"alignment accumulator exceeded {ACC_BITS} bits")
    return acc, plan.base_scale


def reconstruction_mse(x, plan: GroupPlan) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean((dequantize_group_tensor(quantize_group_tensor(x, plan)) - x) ** 2))

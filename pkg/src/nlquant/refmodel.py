"""Double-precision oracles, error sweeps and a synthetic encoder block.

The block runs a standard pre-LN encoder layer (attention + GELU MLP) either
entirely in floating point or with every nonlinearity replaced by the
integer kernels and every nonlinear output group-quantized before it enters
the next matrix product.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.special import expit, ndtr

from . import approxnl as nl
from .fxp import FxError, FxFormat, Q16_16, from_raw, to_raw
from .groupquant import GroupPlan, aligned_codes, fit_plan, quantize_group_tensor

VECTOR_KERNELS = ("softmax", "layernorm")


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def exact_softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def exact_gelu_erf(x):
    x = np.asarray(x, dtype=np.float64)
    return x * ndtr(x)


def exact_gelu_sigmoid(x, gain: float = 1.702):
    x = np.asarray(x, dtype=np.float64)
    return x * expit(gain * x)


def exact_sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def exact_layernorm(x, axis=-1):
    """Zero-mean, unit-variance normalisation (population variance, no eps)."""
    x = np.asarray(x, dtype=np.float64)
    centred = x - x.mean(axis=axis, keepdims=True)
    std = np.sqrt((centred ** 2).mean(axis=axis, keepdims=True))
    return np.divide(centred, std, out=np.zeros_like(centred), where=std > 0)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class ErrorReport:
    kernel: str
    domain: str
    samples: int
    max_abs_error: float
    max_rel_error: float
    mean_squared_error: float
    argmax_abs: float
    argmax_rel: float
    points: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel,
            "domain": self.domain,
            "samples": self.samples,
            "max_abs_error": self.max_abs_error,
            "max_rel_error": self.max_rel_error,
            "mean_squared_error": self.mean_squared_error,
            "argmax_abs": self.argmax_abs,
            "argmax_rel": self.argmax_rel,
        }

    def write_csv(self, path):
        p = self.points
        cols = ["x", "approx", "exact", "abs_error"]
        data = np.column_stack([p["x"], p["approx"], p["exact"], np.abs(p["approx"] - p["exact"])])
        np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.10g")


def parse_domain(domain) -> np.ndarray:
    """``"lo:hi:step"`` (inclusive) or ``"int8"`` into a float grid."""
    if isinstance(domain, str):
        if domain.strip().lower() == "int8":
            return np.arange(-128, 128, dtype=np.float64)
        try:
            lo, hi, step = (float(t) for t in domain.split(":"))
        except ValueError:
            raise ValueError(f"bad domain {domain!r}; expected lo:hi:step or int8") from None
    else:
        lo, hi, step = domain
    if not step > 0 or hi < lo:
        raise ValueError(f"bad domain {domain!r}")
    n = int(round((hi - lo) / step)) + 1
    return lo + step * np.arange(n)


def _domain_str(domain) -> str:
    return domain if isinstance(domain, str) else ":".join(repr(float(v)) for v in domain)


def _evaluate(kernel, grid, fmt, extended, vectors, length, seed):
    """Returns (x, approx, exact) flat arrays for one sweep."""
    if kernel in VECTOR_KERNELS:
        rng = np.random.default_rng(seed)
        x = rng.choice(grid, size=(vectors, length))
        raw, _ = to_raw(x, fmt)
        xq = from_raw(raw, fmt)
        if kernel == "softmax":
            approx, exact = nl.softmax_raw(raw, fmt), exact_softmax(xq)
        else:
            approx, exact = nl.layernorm_raw(raw, fmt), exact_layernorm(xq)
        return xq.ravel(), from_raw(approx, fmt).ravel(), exact.ravel()

    if kernel == "ln":
        grid = grid[grid > 0]
    elif kernel == "isqrt":
        grid = grid[grid >= 0]
    raw, _ = to_raw(grid, fmt)
    if kernel == "ln":
        raw = raw[raw > 0]
    xq = from_raw(raw, fmt)
    if kernel == "exp":
        if not extended and np.any(raw > 0):
            raise FxError("exp sweep over positive inputs requires extended mode")
        return xq, from_raw(nl.exp_raw(raw, fmt, extended=extended), fmt), np.exp(xq)
    if kernel == "ln":
        return xq, from_raw(nl.ln_raw(raw, fmt), fmt), np.log(xq)
    if kernel == "sigmoid":
        return xq, from_raw(nl.sigmoid_raw(raw, fmt), fmt), exact_sigmoid(xq)
    if kernel == "gelu":
        return xq, from_raw(nl.gelu_raw(raw, fmt), fmt), exact_gelu_erf(xq)
    if kernel == "isqrt":
        root, _ = nl.isqrt_raw(raw, fmt)
        return xq, from_raw(root, fmt), np.sqrt(xq)
    raise ValueError(f"unknown kernel {kernel!r}; expected one of {nl.KERNELS}")


def sweep_error(kernel: str, domain, fmt: FxFormat = Q16_16, extended: bool = False,
                vectors: int = 256, length: int = 64, seed: int = 0) -> ErrorReport:
    """Integer kernel against its double-precision oracle over a grid.

    Scalar kernels are evaluated at every grid point. Vector kernels
    (softmax, layernorm) draw ``vectors`` rows of ``length`` grid values.
    Relative error skips points where the oracle is exactly zero.
    """
    if kernel not in nl.KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; expected one of {nl.KERNELS}")
    grid = parse_domain(domain)
    x, approx, exact = _evaluate(kernel, grid, fmt, extended, vectors, length, seed)
    if x.size == 0:
        raise ValueError("domain has no points inside the kernel's domain")
    err = np.abs(approx - exact)
    nz = exact != 0
    rel = np.zeros_like(err)
    rel[nz] = err[nz] / np.abs(exact[nz])
    ia, ir = int(err.argmax()), int(rel.argmax())
    return ErrorReport(kernel, _domain_str(domain), int(x.size), float(err[ia]), float(rel[ir]),
                       float(np.mean(err ** 2)), float(x[ia]), float(x[ir]),
                       points={"x": x, "approx": approx, "exact": exact})


def _canonical(domain):
    if not isinstance(domain, str):
        return None
    d = domain.strip().lower()
    try:
        return d if d == "int8" else tuple(float(t) for t in d.split(":"))
    except ValueError:
        return d


def load_expectations() -> dict:
    """Frozen regression bounds shipped with the package."""
    text = resources.files("nlquant").joinpath("data/expectations.json").read_text()
    return json.loads(text)


def check_expectations(report: ErrorReport, expectations: dict | None = None):
    """Returns (applicable, ok, bounds) for a report against the frozen file."""
    expectations = load_expectations() if expectations is None else expectations
    entry = expectations.get("sweeps", {}).get(report.kernel)
    if entry is None or _canonical(entry.get("domain")) != _canonical(report.domain):
        return False, True, {}
    bounds = {k: v for k, v in entry.items() if k.startswith("max_")}
    ok = all(getattr(report, k) <= v for k, v in bounds.items())
    return True, ok, bounds


# ---------------------------------------------------------------------------
# Synthetic encoder block
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SyntheticBlock:
    tokens: int = 16
    heads: int = 2
    dim: int = 32
    mlp_dim: int = 64
    seed: int = 0
    channel_scales: tuple = (1.0, 1.0)  # smallest and largest input channel scale
    heavy_tail_df: float | None = None  # Student-t input noise when set

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("model dim must be divisible by heads")
        rng = np.random.default_rng(self.seed)

        def lin(n_in, n_out):
            return rng.normal(0, n_in ** -0.5, (n_in, n_out)), rng.normal(0, 0.02, n_out)

        w = {}
        for name in ("q", "k", "v", "o"):
            w["w" + name], w["b" + name] = lin(self.dim, self.dim)
        w["w1"], w["b1"] = lin(self.dim, self.mlp_dim)
        w["w2"], w["b2"] = lin(self.mlp_dim, self.dim)
        lo, hi = self.channel_scales
        scales = np.geomspace(lo, hi, self.dim)
        rng.shuffle(scales)
        if self.heavy_tail_df is None:
            noise = rng.normal(size=(self.tokens, self.dim))
        else:
            noise = rng.standard_t(self.heavy_tail_df, size=(self.tokens, self.dim))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "inputs", noise * scales)


def heavy_tailed_preset(seed: int = 42) -> SyntheticBlock:
    """Block whose input channels span 2.5 decades with Student-t(3) noise."""
    return SyntheticBlock(seed=seed, channel_scales=(10 ** -1.5, 10.0), heavy_tail_df=3.0)


def heavy_tailed_activations(seed: int = 42, tokens: int = 512, channels: int = 64) -> np.ndarray:
    """Calibration-style activations with channel max-abs spanning >= 2 decades."""
    rng = np.random.default_rng(seed)
    scales = np.logspace(-1.5, 1.0, channels)
    rng.shuffle(scales)
    return rng.standard_t(3.0, size=(tokens, channels)) * scales


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 8
    n_groups: int = 8
    percentile: float = 99.9
    snap: str = "mse"


@dataclass
class BlockResult:
    output: np.ndarray
    counter: nl.OpCounter
    plans: dict
    metrics: dict


def cosine_similarity(a, b) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / den) if den else float(np.array_equal(a, b))


def max_rel_error(approx, ref) -> float:
    """Largest absolute deviation relative to the reference's peak magnitude."""
    scale = np.abs(ref).max()
    return float(np.abs(np.asarray(approx) - ref).max() / scale) if scale else 0.0


class _Pipeline:
    def __init__(self, mode: str, quant, fmt: FxFormat):
        self.mode = mode
        self.quant = quant
        self.fmt = fmt
        self.counter = nl.OpCounter()
        self.plans: dict = {}

    def _int(self, kernel, x):
        raw, n = to_raw(x, self.fmt)
        self.counter.saturations += n
        return from_raw(kernel(raw, self.fmt, self.counter), self.fmt)

    def layernorm(self, x):
        return exact_layernorm(x) if self.mode == "fp32" else self._int(nl.layernorm_raw, x)

    def softmax(self, x):
        return exact_softmax(x) if self.mode == "fp32" else self._int(nl.softmax_raw, x)

    def gelu(self, x):
        return exact_gelu_erf(x) if self.mode == "fp32" else self._int(nl.gelu_raw, x)

    def matmul(self, site: str, a, w):
        """a @ w, with ``a`` group-quantized along its last axis in integer mode.

        Quantized codes are aligned onto the reference step by shifts and the
        consumer weight takes the inverse reorder, so the product is
        ``base_scale * (aligned @ w[perm])``.
        """
        if self.mode == "fp32" or self.quant is None:
            return a @ w
        plan = self._plan(site, a)
        q = quantize_group_tensor(a, plan)
        return plan.base_scale * (aligned_codes(q).astype(np.float64) @ w[..., plan.permutation, :])

    def _plan(self, site, a) -> GroupPlan:
        if site in self.plans:
            return self.plans[site]
        if isinstance(self.quant, dict):
            plan = self.quant[site]
        else:
            g = min(self.quant.n_groups, a.shape[-1])
            plan = fit_plan(a, g, self.quant.bits, self.quant.percentile, snap=self.quant.snap)
        self.plans[site] = plan
        return plan


def _forward(block: SyntheticBlock, p: _Pipeline) -> np.ndarray:
    w = block.weights
    x = block.inputs
    t, h = block.tokens, block.heads
    dh = block.dim // h

    a = p.layernorm(x)
    q = p.matmul("ln1", a, w["wq"]) + w["bq"]
    k = p.matmul("ln1", a, w["wk"]) + w["bk"]
    v = p.matmul("ln1", a, w["wv"]) + w["bv"]
    q, k, v = (m.reshape(t, h, dh).transpose(1, 0, 2) for m in (q, k, v))
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
    probs = p.softmax(scores)
    ctx = p.matmul("softmax", probs, v)  # (h, t, dh)
    ctx = ctx.transpose(1, 0, 2).reshape(t, block.dim)
    x1 = x + ctx @ w["wo"] + w["bo"]

    a2 = p.layernorm(x1)
    hidden = p.gelu(p.matmul("ln2", a2, w["w1"]) + w["b1"])
    return x1 + p.matmul("gelu", hidden, w["w2"]) + w["b2"]


def simulate_block(block: SyntheticBlock, mode: str = "integer", quant=None,
                   fmt: FxFormat = Q16_16) -> BlockResult:
    """Run the block in ``"fp32"`` or ``"integer"`` mode.

    ``quant`` is None (no activation quantization), a :class:`QuantConfig`
    (plans calibrated on the activations at each site) or a dict of
    :class:`GroupPlan` keyed by site: ``ln1``, ``softmax``, ``ln2``, ``gelu``.
    Integer-mode results carry cosine similarity and max relative error
    against the floating-point run, for the block output and for the
    residual branch alone (output minus input), which the residual path
    would otherwise mask.
    """
    if mode not in ("fp32", "integer"):
        raise ValueError(f"mode must be 'fp32' or 'integer', got {mode!r}")
    pipe = _Pipeline(mode, quant, fmt)
    out = _forward(block, pipe)
    metrics = {}
    if mode == "integer":
        ref = _forward(block, _Pipeline("fp32", None, fmt))
        x = block.inputs
        metrics = {"cosine_similarity": cosine_similarity(out, ref),
                   "max_rel_error": max_rel_error(out, ref),
                   "branch_cosine_similarity": cosine_similarity(out - x, ref - x),
                   "branch_max_rel_error": max_rel_error(out - x, ref - x)}
    return BlockResult(out, pipe.counter, pipe.plans, metrics)

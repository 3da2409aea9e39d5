"""QTNS1 tensor container and run configuration.

File layout::

    b"QTNS1" | u32 little-endian header length | UTF-8 JSON header | payload

The header records ``kind`` (f64, i32 or i8), ``shape``, ``byte_order``
(always ``"little"``), an optional ``scale`` for quantized payloads, and an
optional free-form ``meta`` object. The payload is the row-major elements.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

MAGIC = b"QTNS1"
KINDS = {"f64": np.dtype("<f8"), "i32": np.dtype("<i4"), "i8": np.dtype("i1")}


class FramingError(ValueError):
    """A tensor file is malformed or truncated."""


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(eq=False)
class Tensor:
    data: np.ndarray
    scale: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        for name, dt in KINDS.items():
            if self.data.dtype.kind == dt.kind and self.data.dtype.itemsize == dt.itemsize:
                return name
        raise ValueError(f"unsupported element type {self.data.dtype}")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def dequantized(self) -> np.ndarray:
        if self.scale is None:
            return self.data.astype(np.float64)
        return self.data.astype(np.float64) * self.scale


def write_tensor(path, tensor) -> None:
    if not isinstance(tensor, Tensor):
        tensor = Tensor(np.asarray(tensor))
    kind = tensor.kind
    header = {"kind": kind, "shape": list(tensor.shape), "byte_order": "little"}
    if tensor.scale is not None:
        header["scale"] = float(tensor.scale)
    if tensor.meta:
        header["meta"] = tensor.meta
    head = json.dumps(header, sort_keys=True).encode()
    payload = np.ascontiguousarray(tensor.data, dtype=KINDS[kind]).tobytes()
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(head)) + head + payload)


def read_tensor(path) -> Tensor:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise FramingError(f"{path}: bad magic")
    pos = len(MAGIC)
    if len(blob) < pos + 4:
        raise FramingError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + hlen:
        raise FramingError(f"{path}: truncated header")
    try:
        header = json.loads(blob[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FramingError(f"{path}: unreadable header ({exc})") from None
    pos += hlen
    kind = header.get("kind")
    if kind not in KINDS:
        raise FramingError(f"{path}: unsupported element kind {kind!r}")
    if header.get("byte_order", "little") != "little":
        raise FramingError(f"{path}: only little-endian payloads are defined")
    shape = tuple(int(d) for d in header.get("shape", ()))
    if any(d < 0 for d in shape):
        raise FramingError(f"{path}: negative dimension in {shape}")
    dt = KINDS[kind]
    expect = math.prod(shape) * dt.itemsize
    if len(blob) - pos != expect:
        raise FramingError(f"{path}: payload has {len(blob) - pos} bytes, shape {shape} needs {expect}")
    data = np.frombuffer(blob, dtype=dt, offset=pos).reshape(shape)
    # native byte order for downstream arithmetic
    data = data.astype(dt.newbyteorder("="), copy=True)
    return Tensor(data, header.get("scale"), header.get("meta") or {})


VALID_BITS = (4, 6, 8, 16, 32)


@dataclass(frozen=True)
class RunConfig:
    total_bits: int = 32
    frac_bits: int = 16
    bits: int = 8
    bop_budget: float | None = None  # None: unconstrained
    candidate_groups: tuple = (1, 2, 4, 8, 16, 32)
    clamp_percentile: float = 99.9
    snap: str = "mse"
    seed: int = 0
    sweep_domains: dict = field(default_factory=lambda: dict(DEFAULT_SWEEP_DOMAINS))

    @property
    def q_max(self) -> int:
        return (1 << (self.bits - 1)) - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["candidate_groups"] = list(self.candidate_groups)
        return d


DEFAULT_SWEEP_DOMAINS = {
    "exp": "-8:0:0.001",
    "ln": "1:256:0.01",
    "sigmoid": "-8:8:0.001",
    "gelu": "-6:6:0.001",
    "isqrt": "0:128:0.01",
    "softmax": "int8",
    "layernorm": "int8",
}


def _as_int(name, v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(name, f"expected an integer, got {v!r}")
    return v


def _as_num(name, v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(name, f"expected a number, got {v!r}")
    return float(v)


def parse_config(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    kw = {}
    if "total_bits" in raw:
        kw["total_bits"] = _as_int("total_bits", raw["total_bits"])
    if "frac_bits" in raw:
        kw["frac_bits"] = _as_int("frac_bits", raw["frac_bits"])
    tb, fb = kw.get("total_bits", 32), kw.get("frac_bits", 16)
    if not 0 < fb < tb <= 62:
        raise ConfigError("frac_bits", f"need 0 < frac_bits < total_bits <= 62, got {fb}/{tb}")
    if "bits" in raw:
        b = _as_int("bits", raw["bits"])
        if b not in VALID_BITS:
            raise ConfigError("bits", f"must be one of {VALID_BITS}, got {b}")
        kw["bits"] = b
    if raw.get("bop_budget") is not None:
        budget = _as_num("bop_budget", raw["bop_budget"])
        if budget < 0:
            raise ConfigError("bop_budget", "must be non-negative")
        kw["bop_budget"] = budget
    if "candidate_groups" in raw:
        cands = raw["candidate_groups"]
        if not isinstance(cands, (list, tuple)) or not cands:
            raise ConfigError("candidate_groups", "expected a non-empty list")
        cands = tuple(_as_int("candidate_groups", g) for g in cands)
        if any(g < 1 or g & (g - 1) for g in cands):
            raise ConfigError("candidate_groups", "entries must be powers of two")
        if 1 not in cands:
            raise ConfigError("candidate_groups", "must include 1")
        kw["candidate_groups"] = tuple(sorted(set(cands)))
    if "clamp_percentile" in raw:
        p = _as_num("clamp_percentile", raw["clamp_percentile"])
        if not 50 < p <= 100:
            raise ConfigError("clamp_percentile", f"must lie in (50, 100], got {p}")
        kw["clamp_percentile"] = p
    if "snap" in raw:
        if raw["snap"] not in ("mse", "nearest", "ceil"):
            raise ConfigError("snap", "must be one of mse, nearest, ceil")
        kw["snap"] = raw["snap"]
    if "seed" in raw:
        kw["seed"] = _as_int("seed", raw["seed"])
    if "sweep_domains" in raw:
        doms = raw["sweep_domains"]
        if not isinstance(doms, dict):
            raise ConfigError("sweep_domains", "expected a mapping of kernel to domain")
        bad = sorted(set(doms) - set(DEFAULT_SWEEP_DOMAINS))
        if bad:
            raise ConfigError("sweep_domains", f"unknown kernel {bad[0]!r}")
        kw["sweep_domains"] = {**DEFAULT_SWEEP_DOMAINS, **{k: str(v) for k, v in doms.items()}}
    return RunConfig(**kw)


def load_config(path) -> RunConfig:
    """Read a YAML (or JSON) config; an empty file yields all defaults."""
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML/JSON ({exc})") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("<file>", "top level must be a mapping")
    return parse_config(raw)

"""Calibration statistics, histogram KL cost and BOP-constrained group allocation."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import reduce
from typing import Iterable, Sequence

import numpy as np

from .groupquant import dequantize_group_tensor, fit_plan, quantize_group_tensor

N_BINS = 2048
KL_EPS = 1e-9


@dataclass(frozen=True)
class ChannelStats:
    min: float
    max: float
    mean: float
    variance: float
    histogram: np.ndarray
    sample_count: int

    @property
    def max_abs(self) -> float:
        return max(abs(self.min), abs(self.max))


@dataclass(frozen=True, eq=False)
class LayerStats:
    """Per-channel statistics for one layer, stored column-wise."""

    min: np.ndarray
    max: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    histograms: np.ndarray  # (C, bins)
    bin_edges: np.ndarray
    sample_count: int

    @property
    def n_channels(self) -> int:
        return self.mean.size

    @property
    def max_abs(self) -> np.ndarray:
        return np.maximum(np.abs(self.min), np.abs(self.max))

    def __len__(self):
        return self.n_channels

    def __getitem__(self, c: int) -> ChannelStats:
        return ChannelStats(float(self.min[c]), float(self.max[c]), float(self.mean[c]),
                            float(self.variance[c]), self.histograms[c], self.sample_count)

    def summary(self) -> dict:
        return {
            "channels": self.n_channels,
            "samples_per_channel": self.sample_count,
            "min": self.min.tolist(),
            "max": self.max.tolist(),
            "mean": self.mean.tolist(),
            "variance": self.variance.tolist(),
        }


class RunningMoments:
    """Per-channel count/mean/M2 merged batch by batch (Chan et al. update)."""

    def __init__(self, n_channels: int):
        self.n = 0
        self.mean = np.zeros(n_channels)
        self.m2 = np.zeros(n_channels)
        self.min = np.full(n_channels, np.inf)
        self.max = np.full(n_channels, -np.inf)

    def update(self, batch: np.ndarray):
        batch = np.asarray(batch, dtype=np.float64).reshape(-1, self.mean.size)
        nb = batch.shape[0]
        if nb == 0:
            return
        mb = batch.mean(axis=0)
        m2b = ((batch - mb) ** 2).sum(axis=0)
        n = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + m2b + delta ** 2 * (self.n * nb / n)
        self.n = n
        self.min = np.minimum(self.min, batch.min(axis=0))
        self.max = np.maximum(self.max, batch.max(axis=0))

    @property
    def variance(self) -> np.ndarray:
        return self.m2 / self.n if self.n else np.zeros_like(self.m2)


def _edges(lo: float, hi: float, bins: int) -> np.ndarray:
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def collect_stats(samples: Iterable, bins: int = N_BINS) -> LayerStats:
    """Per-channel statistics over a batch of activation tensors shaped (..., C).

    Moments stream sample by sample; the histogram needs the global range,
    so samples are revisited once after the moment pass.
    """
    samples = [np.asarray(s, dtype=np.float64) for s in samples]
    if not samples:
        raise ValueError("empty calibration batch")
    c = samples[0].shape[-1]
    for i, s in enumerate(samples):
        if s.shape[-1] != c:
            raise ValueError(f"sample {i} has {s.shape[-1]} channels, expected {c}")
    mom = RunningMoments(c)
    for s in samples:
        mom.update(s)
    edges = _edges(float(mom.min.min()), float(mom.max.max()), bins)
    hist = np.zeros((c, bins), dtype=np.int64)
    for s in samples:
        flat = s.reshape(-1, c)
        idx = np.clip(np.searchsorted(edges, flat, side="right") - 1, 0, bins - 1)
        for ch in range(c):
            hist[ch] += np.bincount(idx[:, ch], minlength=bins)
    return LayerStats(mom.min, mom.max, mom.mean, mom.variance, hist, edges, mom.n)


def kl_divergence(p_counts, q_counts, eps: float = KL_EPS) -> float:
    """D_KL(P || Q) between two histograms after additive smoothing."""
    p = np.asarray(p_counts, dtype=np.float64)
    q = np.asarray(q_counts, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("histograms must share bins")
    p = p / p.sum() + eps
    q = q / q.sum() + eps
    p /= p.sum()
    q /= q.sum()
    return float(max(np.sum(p * np.log(p / q)), 0.0))


def kl_cost(sample, n_groups: int, bits: int, percentile: float = 99.9,
            bins: int = N_BINS) -> float:
    """KL between a layer's calibration values and their g-group reconstruction."""
    x = np.asarray(sample, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    plan = fit_plan(flat, n_groups, bits, percentile)
    recon = dequantize_group_tensor(quantize_group_tensor(flat, plan))
    edges = _edges(float(flat.min()), float(flat.max()), bins)
    p, _ = np.histogram(flat, edges)
    q, _ = np.histogram(np.clip(recon, edges[0], edges[-1]), edges)
    return kl_divergence(p, q)


def candidate_groups(n_channels: int, candidates: Sequence[int] | None = None) -> list[int]:
    """Powers of two up to the channel count (intersected with ``candidates``)."""
    pows = [1 << i for i in range(n_channels.bit_length()) if 1 << i <= n_channels]
    if candidates is None:
        return pows
    return sorted(set(pows) & set(int(g) for g in candidates)) or [1]


@dataclass(frozen=True)
class LayerChoice:
    channels: int
    candidates: tuple
    costs: tuple

    def __post_init__(self):
        if len(self.candidates) != len(self.costs):
            raise ValueError("one KL cost per candidate required")
        if 1 not in self.candidates:
            raise ValueError("candidate group counts must include 1")
        for g in self.candidates:
            if g < 1 or g & (g - 1):
                raise ValueError(f"candidate {g} is not a power of two")
        if any(c < 0 for c in self.costs):
            raise ValueError("KL costs must be non-negative")


@dataclass(frozen=True)
class AllocationProblem:
    layers: tuple
    bits: int
    budget: float

    def bop(self, layer: int, g: int) -> int:
        """Extra bit operations of g groups: C * b * log2(g)."""
        return self.layers[layer].channels * self.bits * (g.bit_length() - 1)

    def objective(self, assignment) -> float:
        total = 0.0
        for l, g in enumerate(assignment):
            total += self.layers[l].costs[self.layers[l].candidates.index(g)]
        return total

    def total_bop(self, assignment) -> int:
        return sum(self.bop(l, g) for l, g in enumerate(assignment))


def allocate_groups(problem: AllocationProblem) -> list[int]:
    """Exact multiple-choice knapsack DP over an integer-rescaled BOP axis.

    Ties break towards smaller total BOP, then the lexicographically smaller
    group vector.
    """
    if problem.budget < 0:
        raise ValueError("BOP budget must be non-negative")
    if not problem.layers:
        return []
    weights = [[problem.bop(l, g) for g in layer.candidates]
               for l, layer in enumerate(problem.layers)]
    unit = reduce(math.gcd, (w for ws in weights for w in ws if w), 0) or 1
    max_total = sum(max(ws) for ws in weights) // unit
    cap = min(int(math.floor(problem.budget)) // unit, max_total) if math.isfinite(problem.budget) \
        else max_total

    # best[w] = (objective, groups) over assignments with total weight exactly w
    best: dict[int, tuple[float, tuple]] = {0: (0.0, ())}
    for layer, ws in zip(problem.layers, weights):
        nxt: dict[int, tuple[float, tuple]] = {}
        for w0, (obj, gs) in best.items():
            for g, cost, w in zip(layer.candidates, layer.costs, ws):
                w1 = w0 + w // unit
                if w1 > cap:
                    continue
                cand = (obj + cost, gs + (g,))
                if w1 not in nxt or cand < nxt[w1]:
                    nxt[w1] = cand
        best = nxt
    w, (obj, gs) = min(best.items(), key=lambda kv: (kv[1][0], kv[0], kv[1][1]))
    return list(gs)


def brute_force_allocation(problem: AllocationProblem) -> list[int]:
    """Exhaustive reference for :func:`allocate_groups` (same tie-break)."""
    best = None
    for gs in itertools.product(*(layer.candidates for layer in problem.layers)):
        bop = problem.total_bop(gs)
        if bop > problem.budget:
            continue
        key = (problem.objective(gs), bop, gs)
        if best is None or key < best:
            best = key
    return list(best[2])


def build_problem(samples_by_layer: dict, bits: int, budget: float,
                  candidates: Sequence[int] | None = None, percentile: float = 99.9,
                  bins: int = N_BINS) -> tuple[list[str], AllocationProblem]:
    """KL cost tables for every layer and candidate group count."""
    names = list(samples_by_layer)
    layers = []
    for name in names:
        x = np.asarray(samples_by_layer[name], dtype=np.float64)
        cands = candidate_groups(x.shape[-1], candidates)
        costs = tuple(kl_cost(x, g, bits, percentile, bins) for g in cands)
        layers.append(LayerChoice(x.shape[-1], tuple(cands), costs))
    return names, AllocationProblem(tuple(layers), bits, budget)

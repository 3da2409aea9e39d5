"""Calibration statistics, KL costs and group allocation under a BOP budget.

Run: python demos/03_calibration_allocation.py
"""

# %% Three layers with different channel spreads
import numpy as np

from nlquant.calib import AllocationProblem, allocate_groups, build_problem, collect_stats
from nlquant.refmodel import heavy_tailed_activations

layers = {
    "attn_out": heavy_tailed_activations(seed=1, tokens=256, channels=32),
    "ffn_in": heavy_tailed_activations(seed=2, tokens=256, channels=64),
    "ffn_out": np.random.default_rng(3).standard_normal((256, 32)),  # homogeneous
}
for name, acts in layers.items():
    stats = collect_stats([acts])
    print(f"{name:9s} C={stats.n_channels:3d} max-abs ratio {stats.max_abs.max() / stats.max_abs.min():8.1f}")

# %% KL divergence of each candidate group count against the float histogram
names, problem = build_problem(layers, bits=4, budget=np.inf, candidates=(1, 2, 4, 8, 16))
for name, layer in zip(names, problem.layers):
    print(name, {g: round(c, 3) for g, c in zip(layer.candidates, layer.costs)})

# %% The knapsack solver spends extra bit operations where they buy the most
for budget in (0, 256, 768, np.inf):
    problem = AllocationProblem(problem.layers, problem.bits, budget)
    gs = allocate_groups(problem)
    print(f"budget {budget:>6}: groups {gs}, BOP {problem.total_bop(gs)}, KL {problem.objective(gs):.3f}")

"""Reorder-based group quantization on activations with spread-out channels.

Run: python demos/02_group_quantization.py
"""

# %% Heavy-tailed activations whose channel ranges cover more than two decades
import numpy as np

from nlquant.groupquant import (
    align_accumulate,
    dequantize_group_tensor,
    fit_plan,
    fuse_inverse,
    fuse_permutation,
    quantize_group_tensor,
    reconstruction_mse,
)
from nlquant.refmodel import heavy_tailed_activations

x = heavy_tailed_activations()
span = np.abs(x).max(axis=0)
print(f"{x.shape[1]} channels, max-abs from {span.min():.3f} to {span.max():.1f}")

# %% Sort channels by range, cut into 8 groups, snap each scale to 2**k * base
plan = fit_plan(x, n_groups=8, bits=4)
print("permutation head:", plan.permutation[:8])
print("k per group:     ", plan.k)
print("thresholds:      ", np.round(plan.thresholds, 3))

# %% Error against a single per-tensor scale
for bits in (4, 8):
    flat = reconstruction_mse(x, fit_plan(x, 1, bits))
    grouped = reconstruction_mse(x, fit_plan(x, 8, bits))
    print(f"b={bits}: MSE per-tensor {flat:.4f}, 8 groups {grouped:.4f}")

# %% Codes from different groups add exactly once shifted onto the base grid
q = quantize_group_tensor(x[:1], plan)
pairs = list(zip(q.codes[0].tolist(), plan.channel_group.tolist()))
total, base = align_accumulate(pairs, plan)
print("aligned sum", total * base, "vs dequantized sum", dequantize_group_tensor(q).sum())

# %% The reorder folds into the neighbouring weights, so it costs nothing at run time
rng = np.random.default_rng(0)
w_prev, w_next = rng.standard_normal((16, 64)), rng.standard_normal((64, 16))
h = rng.standard_normal((4, 16))
fused = (h @ fuse_permutation(w_prev, None, plan.permutation)[0]) @ fuse_inverse(w_next, plan.permutation)
print("fusion deviation", np.abs(fused - h @ w_prev @ w_next).max())

"""Integer-only nonlinear kernels, compared with their floating-point forms.

Run: python demos/01_integer_kernels.py
"""

# %% Fixed-point values carry a raw integer and a Q format
import numpy as np

from nlquant import approxnl as nl
from nlquant.fxp import fx_from_real, from_raw, to_raw
from nlquant.refmodel import exact_gelu_erf, exact_softmax

x = fx_from_real(-1.4375)
print(x, "raw", x.raw)

# %% Exponential: a shift-add base change, a quadratic on (-1, 0], then a shift
for v in (0.0, -1.0, -4.0):
    approx = nl.appro_exp(fx_from_real(v)).value
    print(f"exp({v:5.1f}) = {approx:.5f}  (true {np.exp(v):.5f})")

# %% Natural log: MSB position plus a quadratic on [1, 2), times 0.1011b
for v in (1.0, 2.0, 8.0, 200.0):
    approx = nl.appro_ln(fx_from_real(v)).value
    print(f"ln({v:5.1f}) = {approx:.5f}  (true {np.log(v):.5f})")

# %% Softmax without a divider: exp(x - max - ln(sum exp))
logits = np.array([2.0, 1.0, 0.0, -3.0])
raw, _ = to_raw(logits)
probs = from_raw(nl.softmax_raw(raw))
print("softmax int ", np.round(probs, 4), "sum", probs.sum().round(4))
print("softmax fp64", np.round(exact_softmax(logits), 4))

# %% GELU: identity / zero outside (-2.4, 2.4), x * sigmoid(1.703125 x) inside
grid = np.linspace(-4, 4, 9)
raw, _ = to_raw(grid)
print("gelu int ", np.round(from_raw(nl.gelu_raw(raw)), 4))
print("gelu erf ", np.round(exact_gelu_erf(grid), 4))

# %% LayerNorm: the square root is Newton's method with log-division inside
row = np.array([3.0, -1.0, 4.0, 1.0, -5.0, 9.0, 2.0, -6.0])
raw, _ = to_raw(row)
counter = nl.OpCounter()
out = from_raw(nl.layernorm_raw(raw, counter=counter))
print("layernorm", np.round(out, 3), "mean", out.mean().round(4), "var", out.var().round(4))
print("operations:", counter.as_dict())

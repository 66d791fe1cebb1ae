"""The autodiff engine underneath the model, checked against finite differences.

Run: python demos/03_autodiff.py
"""

import numpy as np

from vipg import numerics as nx
from vipg.numerics import Tensor

rng = np.random.default_rng(0)

# A tensor records the operation that produced it; backward() walks that
# graph in reverse and accumulates gradients into the leaves.
w = nx.parameter(rng.uniform(-1, 1, (4, 3)), name="w")
x = Tensor(rng.uniform(-1, 1, (2, 4)))
loss = nx.sum_all(nx.sigmoid(nx.matmul(x, w)))
nx.backward(loss)
print("loss", round(loss.item(), 4))
print("dloss/dw\n", np.round(w.grad, 4))

# The same gradient by hand: d sigmoid(z) = s (1 - s)
s = 1 / (1 + np.exp(-(x.data @ w.data)))
print("matches by hand:", np.allclose(w.grad, x.data.T @ (s * (1 - s)), atol=1e-6))

# grad_check perturbs every input entry and compares with central
# differences, taken in 64-bit so rounding does not drown the step.
k, v = Tensor(rng.uniform(-1, 1, (5, 8))), Tensor(rng.uniform(-1, 1, (5, 8)))
mask = np.tril(np.ones((3, 5)), k=2)
for name, f, shape in [
    ("layer norm", lambda t: nx.layer_norm(t, Tensor(np.ones(8)), Tensor(np.zeros(8))), (3, 8)),
    ("masked softmax", lambda t: nx.softmax_rows(t, mask), (3, 5)),
    ("two-head attention", lambda q: nx.attention(q, k, v, mask, heads=2), (3, 8)),
]:
    r = nx.grad_check(f, rng.uniform(-1, 1, shape))
    print(f"{name:20s} max relative error {r.max_rel_err:.1e} over {r.n_checked} entries")

"""Inner-training structure: batching, epochs, learning rate, divergence.

Full-batch updates are order-free; sequential mini-batches induce a causal
dependence on token order. The inner learning rate can be absorbed into the
scale of K and V for a linear inner model with MSE, and a token-wise dynamic
rate with a zero projection is exactly the fixed rate halved.
"""

import numpy as np

from tttlab.inner import InnerModel, InnerTrainConfig, DivergenceError, inner_update

rng = np.random.default_rng(0)
d, n = 4, 8
k = rng.standard_normal((n, d))
v = rng.standard_normal((n, d))
model = InnerModel.create("mlp_r1_l2", d, rng)

# token order: invisible to full-batch training, visible across mini-batches
full = inner_update(model, k, v, InnerTrainConfig(loss="mse"))
perm = rng.permutation(n)
full_perm = inner_update(model, k[perm], v[perm], InnerTrainConfig(loss="mse"))
print("full batch, tokens shuffled, weight diff:",
      max(np.abs(a - b).max() for a, b in zip(full.weights, full_perm.weights)))

mini = InnerTrainConfig(loss="mse", parts=2)
base = inner_update(model, k, v, mini)
swap = np.arange(n)
swap[[0, n - 1]] = [n - 1, 0]   # crosses the mini-batch boundary
other = inner_update(model, k[swap], v[swap], mini)
print("2 sequential mini-batches, cross-boundary swap, weight diff:",
      max(np.abs(a - b).max() for a, b in zip(base.weights, other.weights)))

# learning-rate absorption for the linear inner model with MSE
w0 = rng.standard_normal((d, d))
lin = InnerModel(kind="fc", d=d, weights=[w0.copy()])
eta = 2.5
a = inner_update(lin, k, v, InnerTrainConfig(loss="mse", lr=eta))
b = inner_update(lin, np.sqrt(eta) * k, np.sqrt(eta) * v,
                 InnerTrainConfig(loss="mse", lr=1.0))
print(f"eta={eta} vs (sqrt(eta) K, sqrt(eta) V, eta=1), weight diff:",
      np.abs(a.weights[0] - b.weights[0]).max())

# token-wise dynamic rate, zero projection == fixed rate / 2
x = rng.standard_normal((n, 10))
dyn = inner_update(model, k, v,
                   InnerTrainConfig(loss="mse", lr=1.0, dynamic_lr=True),
                   x=x, w_eta=np.zeros((10, 1)))
half = inner_update(model, k, v, InnerTrainConfig(loss="mse", lr=0.5))
print("dynamic rate (W_eta = 0) equals fixed eta/2 exactly:",
      all(np.array_equal(p, q) for p, q in zip(dyn.weights, half.weights)))

# the divergence sentinel reports unstable regimes instead of emitting NaNs
try:
    with np.errstate(over="ignore", invalid="ignore"):
        inner_update(lin, 1e3 * k, v, InnerTrainConfig(loss="mse", lr=100.0, epochs=60))
except DivergenceError as e:
    print("divergence sentinel:", e)

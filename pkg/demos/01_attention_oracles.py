"""Three views of attention, checked against each other.

1. Softmax attention is literally a two-layer MLP acting on Q whose hidden
   width is the sequence length: weights W1 = K^T, W2 = V.
2. Linear attention compresses (K, V) into a d x d state, computable in O(N).
3. A TTT layer with a linear inner model, zero initial weights and one MSE
   step reproduces scaled unnormalized linear attention exactly.
"""

import numpy as np

from tttlab import tensor as T
from tttlab.inner import InnerTrainConfig
from tttlab.layer import (TTTLayerParams, attention_mlp_oracle, elu_plus_one,
                          linear_attention, ttt_attention)

rng = np.random.default_rng(0)

# -- softmax attention == MLP with W1 = K^T, W2 = V --------------------------
n, d = 6, 4
q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
direct = T.matmul(T.softmax_rows(T.matmul(q, T.transpose(k))), v)
as_mlp = attention_mlp_oracle(q, k, v)
print("softmax attention vs two-layer-MLP view, max diff:",
      np.abs(direct - as_mlp).max())

# with near-orthogonal keys at high scale, the MLP memorizes (K_i -> V_i)
qmat, _ = np.linalg.qr(rng.standard_normal((8, 8)))
keys = 20.0 * qmat
vals = rng.standard_normal((8, 8))
recall_err = np.abs(attention_mlp_oracle(keys, keys, vals) - vals).max()
print("one-hot saturation: retrieving each V_i from its key, err:", recall_err)

# -- linear attention: O(N) accumulated form == quadratic form ----------------
params = TTTLayerParams.create(rng, 16, 2, ("fc", "fc"))
x = rng.standard_normal((10, 16))
fast = linear_attention(x, params)
parts = []
for h in range(2):
    qf = elu_plus_one(x @ params.wq[h])
    kf = elu_plus_one(x @ params.wk[h])
    vh = x @ params.wv[h]
    a = qf @ kf.T                          # the O(N^2) route, for comparison only
    parts.append((a @ vh) / (a @ np.ones(10))[:, None])
slow = np.concatenate(parts, axis=-1) @ params.w_o
print("linear attention O(N) vs O(N^2) forms, max diff:", np.abs(fast - slow).max())

# -- TTT with a linear inner model recovers compressed linear attention -------
for h in range(2):
    params.inner[h].weights = [np.zeros((8, 8))]
eta = 1.0
ttt_out = ttt_attention(x, params, InnerTrainConfig(loss="mse", lr=eta))
parts = [eta / (10 * np.sqrt(8)) * (x @ params.wq[h]) @ ((x @ params.wk[h]).T @ (x @ params.wv[h]))
         for h in range(2)]
ref = np.concatenate(parts, axis=-1) @ params.w_o
print("ttt(FC inner, W0=0, one MSE step) vs eta/(B sqrt(d)) Q K^T V, max diff:",
      np.abs(ttt_out - ref).max())

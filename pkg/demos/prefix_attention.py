"""
Prompts as extra keys and values
================================

A walk through one encoder block with a learned prefix.  Run with
``python demos/prefix_attention.py``.
"""

import numpy as np

from fed3d import tensor as tn
from fed3d.encoder import attention_weights, init_encoder_layer, mhsa_forward, prefix_mhsa_forward

rng = np.random.default_rng(0)

# one block: model width 8, two heads of width 4
layer = init_encoder_layer(8, 2, 4, rng)
x = rng.normal(size=(5, 8))  # five tokens

# with no prompts the block is plain self-attention
plain = mhsa_forward(layer, tn.Tensor(x)).data
empty = (tn.Tensor(np.zeros((2, 0, 4))), tn.Tensor(np.zeros((2, 0, 4))))
print("p = 0 matches plain attention bitwise:", np.array_equal(plain, prefix_mhsa_forward(layer, empty, tn.Tensor(x)).data))

# three prompt slots per head, shape (heads, p, d_head)
pk = tn.Parameter(rng.normal(size=(2, 3, 4)))
pv = tn.Parameter(rng.normal(size=(2, 3, 4)))
out = prefix_mhsa_forward(layer, (pk, pv), tn.Tensor(x))
print("output shape:", out.shape)

# every query now attends over 5 tokens + 3 prompts
w = attention_weights(layer, (pk, pv), x)
print("attention shape (heads, queries, keys):", w.shape)
print("rows sum to one:", np.allclose(w.sum(axis=-1), 1.0))
print("share of attention on the prompts, head 0:", np.round(w[0, :, 5:].sum(axis=1), 3))

# the prompts are the only trainable part; their gradient checks out
loss = lambda: tn.sum_all(tn.mul(prefix_mhsa_forward(layer, (pk, pv), tn.Tensor(x)), tn.Tensor(x)))
print("finite-difference relative error:", tn.param_diff_check(loss, [pk, pv]))

"""
Inside one MoE block
====================

A token's hidden state goes to every shared expert and to the top-k routed
experts chosen by a linear router. This walks through the pieces with the
numpy autodiff engine underneath.
"""
import numpy as np

from gigamoe.model import MLPWeights, gated_mlp, moe_forward, router_forward, tiny_config
from gigamoe.tensor import Tensor, grad_check

rng = np.random.default_rng(0)

# The router scores experts with a dot product. Logistic gates are used as-is,
# so the two chosen gates need not sum to one.
cfg = tiny_config(n_routed_experts=4, top_k=2)
router = Tensor(np.eye(4, 8) * np.array([[2.0], [1.0], [-1.0], [0.5]]))
h = np.zeros(8)
h[:4] = 1.0
out = router_forward(h, router, cfg)
print("affinities", out.affinities.data)
print("selected  ", out.selected, "gates", np.round(out.gates.data, 8))

# A steering bias only moves the selection, never the gate values
biased = router_forward(h, router, cfg, steering_bias=np.array([0, 0, 10.0, 0]))
print("steered   ", biased.selected, "gates", np.round(biased.gates.data, 8))

# With a single routed expert, k=1 and renormalized gates, the block is a plain MLP
dense_cfg = tiny_config(n_routed_experts=1, top_k=1, n_shared_experts=0,
                        gate_mode="softmax-renormalized")
w = MLPWeights(*(Tensor(rng.normal(0, 0.5, s)) for s in ((8, 6), (8, 6), (6, 8))))
x = rng.normal(size=(5, 8))
moe_out, _ = moe_forward(x, [w], [], Tensor(rng.normal(size=(1, 8))), dense_cfg)
print("max |moe - mlp| =", np.abs(moe_out.data - gated_mlp(x, w).data).max())

# Gradients: compare backprop with central differences on the full block
experts = [MLPWeights(*(Tensor(rng.normal(0, 0.5, s)) for s in ((8, 6), (8, 6), (6, 8))))
           for _ in range(4)]
shared = [MLPWeights(*(Tensor(rng.normal(0, 0.5, s)) for s in ((8, 6), (8, 6), (6, 8))))]
r = Tensor(rng.normal(size=(4, 8)))
probe = rng.normal(size=(3, 8))
err = grad_check(lambda t: (moe_forward(t, experts, shared, r, cfg)[0] * probe).sum(),
                 rng.normal(size=(3, 8)))
print(f"grad_check on the block input: {err:.2e}")

"""
What the router does
====================

Record which experts fire per token, summarize balance with two entropies,
build l x e routing embeddings, and push generation toward the experts a
domain likes.
"""
import numpy as np

from gigamoe.model import MoETransformer, ModelConfig, model_forward
from gigamoe.routing import (RoutingTrace, cluster_embeddings, domain_embedding, filter_embedding,
                             h_sparsity, h_utilization, routing_embedding, steering_matrix,
                             telemetry_report)

model = MoETransformer(ModelConfig(n_layers=3), seed=0)
rng = np.random.default_rng(0)

# Two "domains" that use disjoint halves of the vocabulary
samples = {}
for i in range(6):
    lo = 0 if i < 3 else 256
    ids = rng.integers(lo, lo + 256, size=64)
    _, recs = model_forward(model, ids)
    samples[f"s{i}"] = RoutingTrace.from_records(f"s{i}", recs)

tr = samples["s0"]
for layer in range(tr.n_layers):
    print(f"layer {layer}: H_util={h_utilization(tr, layer):.3f}  H_sparse={h_sparsity(tr, layer):.3f}")
print("collapsed experts:", telemetry_report(list(samples.values())).collapsed)

embs = [routing_embedding(t) for t in samples.values()]
print("\nrouting embedding of s0 (rows sum to top_k):\n", np.round(embs[0].matrix, 3))
print("clusters:", cluster_embeddings(embs, 2, seed=0))

# Keep only experts above 3/e and bias selection toward them
domain = filter_embedding(domain_embedding(embs[:3]))
print("\nsupport size per layer:", (domain.matrix > 0).sum(axis=1), "top_k =", model.config.top_k)
# a layer whose support is smaller than top_k must still fill its other slots
prompt = rng.integers(0, 512, size=16)
for strength in (0.0, 0.5, 1e9):
    _, recs = model_forward(model, prompt, steering=steering_matrix(domain, strength))
    hit = np.mean([np.isin(r.selected, np.flatnonzero(domain.matrix[r.layer])).mean()
                   for r in recs])
    print(f"strength {strength:g}: {hit:.0%} of selections inside the domain support")

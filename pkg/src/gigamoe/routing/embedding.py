"""Routing embeddings: per-sample expert activation frequencies, their
domain averages, significance filtering and the steering bias derived from them."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.cluster.vq import kmeans2

from ..errors import InputError
from ..kvtext import atomic_write_text
from .telemetry import RoutingTrace


@dataclass
class RoutingEmbedding:
    """An (MoE layers x routed experts) matrix.

    When built straight from a trace, ``counts`` keeps the integer activation
    counts so row sums can be evaluated without rounding.
    """

    matrix: np.ndarray
    n_tokens: int
    top_k: int
    counts: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def row_sums(self) -> np.ndarray:
        if self.counts is not None:
            return self.counts.sum(axis=1) / self.n_tokens
        return np.array([math.fsum(row) for row in self.matrix])


def routing_embedding(trace: RoutingTrace) -> RoutingEmbedding:
    """``emb[i, j]`` = activations of expert ``j`` in layer ``i`` / token count."""
    if trace.n_tokens < 1:
        raise InputError(f"trace {trace.sample_id!r} has no tokens")
    counts = np.stack([trace.layer_counts(i) for i in range(trace.n_layers)])
    return RoutingEmbedding(counts / trace.n_tokens, trace.n_tokens, trace.top_k, counts)


def domain_embedding(embeddings: Sequence[RoutingEmbedding]) -> RoutingEmbedding:
    """Entrywise mean of sample embeddings (e.g. one cluster's members)."""
    if not embeddings:
        raise InputError("need at least one embedding to average")
    shape = embeddings[0].shape
    for emb in embeddings[1:]:
        if emb.shape != shape:
            raise InputError(f"embedding shapes differ: {emb.shape} vs {shape}")
    if len(embeddings) == 1:
        return embeddings[0]
    mat = np.mean(np.stack([e.matrix for e in embeddings]), axis=0)
    return RoutingEmbedding(mat, sum(e.n_tokens for e in embeddings), embeddings[0].top_k)


def filter_embedding(emb: RoutingEmbedding, n_experts: int | None = None) -> RoutingEmbedding:
    """Zero every entry below ``3 / n_experts``, i.e. keep only experts used at
    least three times more often than uniform routing would."""
    e = emb.shape[1]
    if n_experts is not None and n_experts != e:
        raise InputError(f"expert count {n_experts} != embedding width {e}")
    mat = np.where(emb.matrix < 3.0 / e, 0.0, emb.matrix)
    return RoutingEmbedding(mat, emb.n_tokens, emb.top_k)


def steering_bias(filtered: RoutingEmbedding, layer: int, strength: float) -> np.ndarray:
    """Additive router bias for ``layer``: ``strength * filtered[layer]``."""
    if not 0 <= layer < filtered.shape[0]:
        raise InputError(f"layer {layer} out of range [0, {filtered.shape[0]})")
    if strength < 0:
        raise InputError("steering strength must be non-negative")
    return strength * filtered.matrix[layer]


def steering_matrix(filtered: RoutingEmbedding, strength: float) -> np.ndarray:
    """Bias rows for every MoE layer, ready for ``model_forward(steering=...)``."""
    return np.stack([steering_bias(filtered, i, strength) for i in range(filtered.shape[0])])


def cluster_embeddings(embeddings: Sequence[RoutingEmbedding], n_clusters: int,
                       seed: int = 0, n_init: int = 10) -> np.ndarray:
    """Seeded k-means over flattened embeddings; returns one label per sample."""
    X = np.stack([e.matrix.reshape(-1) for e in embeddings]) if embeddings else np.empty((0, 0))
    if n_clusters < 1 or n_clusters > len(X):
        raise InputError(f"n_clusters must lie in [1, {len(X)}], got {n_clusters}")
    if np.all(X == X[0]):
        warnings.warn("all embeddings identical; returning a single cluster", RuntimeWarning)
        return np.zeros(len(X), dtype=int)
    if n_clusters == 1:
        return np.zeros(len(X), dtype=int)
    rng = np.random.default_rng(seed)
    best_labels, best_inertia = None, np.inf
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # kmeans2 warns about empty clusters on bad restarts
        for _ in range(n_init):
            centroids, labels = kmeans2(X, n_clusters, minit="++", seed=rng)
            inertia = float(((X - centroids[labels]) ** 2).sum())
            if inertia < best_inertia:
                best_labels, best_inertia = labels, inertia
    # relabel by first appearance so labels are stable across restarts
    remap: dict[int, int] = {}
    for lab in best_labels:
        remap.setdefault(int(lab), len(remap))
    return np.array([remap[int(lab)] for lab in best_labels])


# -- matrix text format ----------------------------------------------------

def embedding_text(emb: RoutingEmbedding) -> str:
    l, e = emb.shape
    lines = [f"routing_embedding {l} {e} {emb.top_k} {emb.n_tokens}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in emb.matrix]
    return "\n".join(lines) + "\n"


def write_embedding(path, emb: RoutingEmbedding) -> None:
    atomic_write_text(path, embedding_text(emb))


def read_embedding(path) -> RoutingEmbedding:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    head = lines[0].split() if lines else []
    if len(head) != 5 or head[0] != "routing_embedding":
        raise InputError(f"{path}: missing 'routing_embedding l e top_k tokens' header")
    l, e, k, n = (int(v) for v in head[1:])
    rows = [[float(v) for v in ln.split()] for ln in lines[1:]]
    mat = np.array(rows, dtype=np.float64)
    if mat.shape != (l, e):
        raise InputError(f"{path}: matrix shape {mat.shape} does not match header ({l}, {e})")
    return RoutingEmbedding(mat, n, k)

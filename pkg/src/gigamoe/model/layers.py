"""Building blocks: gated MLP, top-k router, MoE block, rotary embeddings, GQA."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .. import tensor as T
from ..errors import ConfigError, DimensionError, LengthError, ScheduleError
from ..tensor import Tensor
from .config import ModelConfig


class MLPWeights(NamedTuple):
    w_gate: Tensor  # (d_model, d_ff)
    w_up: Tensor    # (d_model, d_ff)
    w_down: Tensor  # (d_ff, d_model)


class AttentionWeights(NamedTuple):
    wq: Tensor  # (d_model, n_heads * head_dim)
    wk: Tensor  # (d_model, n_kv_heads * head_dim)
    wv: Tensor
    wo: Tensor  # (n_heads * head_dim, d_model)


@dataclass
class RouterOutput:
    """Router result for ``n`` tokens (leading axis dropped for a single token)."""

    affinities: Tensor
    selected: np.ndarray   # (n, top_k) ascending expert ids
    gates: Tensor          # (n, top_k) aligned with ``selected``
    probs: Tensor          # (n, n_experts) softmax of the unbiased affinities


@dataclass
class LayerActivationRecord:
    """Routing decisions of one MoE layer over a flattened batch of tokens.

    ``layer`` is the ordinal among MoE layers (0 is the first MoE block,
    i.e. model layer 1).
    """

    layer: int
    selected: np.ndarray
    probs: Tensor
    gates: np.ndarray

    @property
    def distribution(self) -> np.ndarray:
        return self.probs.data

    @property
    def n_tokens(self) -> int:
        return self.selected.shape[0]


def gated_mlp(h, weights: MLPWeights) -> Tensor:
    """``w_down(silu(w_gate h) * w_up h)`` applied row-wise."""
    h = T.as_tensor(h)
    wg, wu, wd = weights
    d = h.shape[-1]
    if wg.shape[0] != d or wu.shape != wg.shape or wd.shape != (wg.shape[1], d):
        raise ConfigError(
            f"gated MLP weights {wg.shape}, {wu.shape}, {wd.shape} do not fit input width {d}")
    squeeze = h.ndim == 1
    x = h.reshape(1, d) if squeeze else h
    out = T.matmul(T.silu(T.matmul(x, wg)) * T.matmul(x, wu), wd)
    return out.reshape(d) if squeeze else out


def topk_ascending(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores per row, ties to the lowest index,
    returned in ascending index order."""
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def router_forward(h, router_weight: Tensor, config: ModelConfig,
                   steering_bias=None) -> RouterOutput:
    """Score experts, pick the top-k and compute gate values per ``config.gate_mode``.

    ``steering_bias`` shifts the affinities used for selection only; gates and
    the recorded distribution come from the unbiased affinities.
    """
    h = T.as_tensor(h)
    e = router_weight.shape[0]
    if config.top_k > e:
        raise ConfigError(f"top_k {config.top_k} exceeds expert count {e}")
    single = h.ndim == 1
    x = h.reshape(1, -1) if single else h
    aff = T.matmul(x, router_weight.T)
    scores = aff.data
    if steering_bias is not None:
        bias = np.asarray(steering_bias, dtype=np.float64)
        if bias.shape != (e,):
            raise DimensionError(f"steering bias shape {bias.shape} != ({e},)")
        scores = scores + bias
    selected = topk_ascending(scores, config.top_k)
    rows = np.arange(selected.shape[0])[:, None]
    probs = T.softmax(aff, axis=-1)
    if config.gate_mode == "sigmoid-unnormalized":
        gates = T.sigmoid(aff)[rows, selected]
    elif config.gate_mode == "softmax-topk-unnormalized":
        gates = probs[rows, selected]
    else:
        picked = probs[rows, selected]
        gates = picked / picked.sum(axis=-1, keepdims=True)
    if single:
        return RouterOutput(aff.reshape(e), selected[0], gates.reshape(-1), probs.reshape(e))
    return RouterOutput(aff, selected, gates, probs)


def moe_forward(h, experts: Sequence[MLPWeights], shared_experts: Sequence[MLPWeights],
                router_weight: Tensor, config: ModelConfig, steering_bias=None,
                layer: int = 0) -> tuple[Tensor, LayerActivationRecord]:
    """Shared experts on every token plus gate-weighted top-k routed experts."""
    h = T.as_tensor(h)
    single = h.ndim == 1
    x = h.reshape(1, -1) if single else h
    route = router_forward(x, router_weight, config, steering_bias)
    out = Tensor(np.zeros(x.shape))
    for weights in shared_experts:
        out = out + gated_mlp(x, weights)
    for j, weights in enumerate(experts):
        rows, slots = np.nonzero(route.selected == j)
        if rows.size == 0:
            continue
        y = gated_mlp(x[rows], weights) * route.gates[rows, slots].reshape(-1, 1)
        out = T.index_add(out, rows, y)
    record = LayerActivationRecord(layer, route.selected, route.probs, route.gates.data.copy())
    return (out.reshape(-1) if single else out), record


# -- rotary embeddings ---------------------------------------------------

def rope_angles(positions, head_dim: int, base: float) -> np.ndarray:
    if head_dim % 2:
        raise ConfigError(f"rotary embeddings need an even head_dim, got {head_dim}")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    return np.multiply.outer(np.asarray(positions, dtype=np.float64), inv_freq)


def rope_apply(x, positions, base: float) -> Tensor:
    """Rotate consecutive coordinate pairs of ``x`` by ``position * base**(-2j/d)``.

    ``positions`` is a scalar (one position for the whole input) or an array
    matching ``x.shape[-2]``.
    """
    x = T.as_tensor(x)
    d = x.shape[-1]
    theta = rope_angles(positions, d, base)
    cos, sin = np.cos(theta), np.sin(theta)
    if theta.ndim == 2 and x.ndim >= 2 and theta.shape[0] != x.shape[-2]:
        raise DimensionError(f"{theta.shape[0]} positions for sequence of {x.shape[-2]}")
    pairs = x.data.reshape(x.shape[:-1] + (d // 2, 2))
    a, b = pairs[..., 0], pairs[..., 1]
    out = np.stack([a * cos - b * sin, a * sin + b * cos], axis=-1).reshape(x.shape)

    def rule(g):
        gp = g.reshape(pairs.shape)
        ga, gb = gp[..., 0], gp[..., 1]
        return (np.stack([ga * cos + gb * sin, -ga * sin + gb * cos], axis=-1).reshape(x.shape),)
    return Tensor._make(out, (x,), rule, "rope")


ABF_SCHEDULE = {8192: 10_000.0, 32768: 300_000.0, 131072: 1_400_000.0}


def abf_base_for_context(target_context: int, override: float | None = None) -> float:
    """RoPE base used when training at ``target_context`` tokens."""
    if override is not None:
        if override <= 0:
            raise ScheduleError("rope base override must be positive")
        return float(override)
    try:
        return ABF_SCHEDULE[int(target_context)]
    except KeyError:
        raise ScheduleError(
            f"no RoPE base scheduled for context {target_context}; "
            f"known: {sorted(ABF_SCHEDULE)}") from None


# -- attention -----------------------------------------------------------

def attention_forward(x, positions, weights: AttentionWeights, config: ModelConfig) -> Tensor:
    """Causal grouped-query self-attention over ``x`` of shape (B, T, d) or (T, d)."""
    x = T.as_tensor(x)
    single = x.ndim == 2
    if single:
        x = x.reshape((1,) + x.shape)
    B, L, _ = x.shape
    if L > config.context_len:
        raise LengthError(f"sequence of {L} tokens exceeds context_len {config.context_len}")
    H, G, hd = config.n_heads, config.n_kv_heads, config.head_dim
    positions = np.arange(L) if positions is None else np.asarray(positions)
    q = T.matmul(x, weights.wq).reshape(B, L, H, hd).transpose(0, 2, 1, 3)
    k = T.matmul(x, weights.wk).reshape(B, L, G, hd).transpose(0, 2, 1, 3)
    v = T.matmul(x, weights.wv).reshape(B, L, G, hd).transpose(0, 2, 1, 3)
    q = rope_apply(q, positions, config.rope_base)
    k = rope_apply(k, positions, config.rope_base)
    if G != H:
        head_map = np.arange(H) // (H // G)
        k = k[:, head_map]
        v = v[:, head_map]
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
    mask = np.triu(np.full((L, L), -np.inf), k=1)
    att = T.softmax(scores + mask, axis=-1)
    out = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, L, H * hd)
    out = T.matmul(out, weights.wo)
    return out.reshape(L, -1) if single else out

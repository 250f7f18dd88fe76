"""Decoder assembly, parameter layout and parameter counting."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .. import tensor as T
from ..errors import DimensionError, InputError
from ..tensor import Tensor, no_grad
from .config import ModelConfig
from .layers import (AttentionWeights, LayerActivationRecord, MLPWeights,
                     attention_forward, gated_mlp, moe_forward)

_MLP = ("w_gate", "w_up", "w_down")


def _mlp_shapes(prefix: str, d: int, ff: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.w_gate", (d, ff)), (f"{prefix}.w_up", (d, ff)),
            (f"{prefix}.w_down", (ff, d))]


def _routed_prefix(cfg: ModelConfig, layer: int, j: int) -> str:
    return f"experts.{j}" if cfg.tie_experts_across_layers else f"layers.{layer}.experts.{j}"


def _shared_prefix(cfg: ModelConfig, layer: int, s: int) -> str:
    return f"shared.{s}" if cfg.tie_shared_experts_across_layers else f"layers.{layer}.shared.{s}"


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every weight in declaration order. Tied experts appear once, at their
    first use."""
    d, hd = cfg.d_model, cfg.head_dim
    shapes: list[tuple[str, tuple[int, ...]]] = [("embed", (cfg.vocab_size, d))]
    seen: set[str] = set()
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        shapes += [(f"{p}.attn_norm", (d,)),
                   (f"{p}.attn.wq", (d, cfg.n_heads * hd)),
                   (f"{p}.attn.wk", (d, cfg.n_kv_heads * hd)),
                   (f"{p}.attn.wv", (d, cfg.n_kv_heads * hd)),
                   (f"{p}.attn.wo", (cfg.n_heads * hd, d)),
                   (f"{p}.mlp_norm", (d,))]
        if i == 0:
            shapes += _mlp_shapes(f"{p}.mlp", d, cfg.d_ff_first)
            continue
        shapes.append((f"{p}.router", (cfg.n_routed_experts, d)))
        for s in range(cfg.n_shared_experts):
            pre = _shared_prefix(cfg, i, s)
            if pre not in seen:
                seen.add(pre)
                shapes += _mlp_shapes(pre, d, cfg.d_ff_expert)
        for j in range(cfg.n_routed_experts):
            pre = _routed_prefix(cfg, i, j)
            if pre not in seen:
                seen.add(pre)
                shapes += _mlp_shapes(pre, d, cfg.d_ff_expert)
    shapes += [("final_norm", (d,)), ("lm_head", (d, cfg.vocab_size))]
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(cfg):
        if name.endswith("norm"):
            data = np.ones(shape)
        else:
            data = rng.normal(0.0, cfg.init_std, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def count_params(cfg: ModelConfig) -> tuple[int, int]:
    """(total, active per token).

    Active counts everything a single token touches: embeddings, attention,
    norms, routers, shared experts, ``top_k`` routed experts per MoE layer and
    the output head. With cross-layer tying a token can reuse the same
    expert in several layers, so tied experts count at most once.
    """
    total = sum(int(np.prod(s)) for _, s in parameter_shapes(cfg))
    expert = 3 * cfg.d_model * cfg.d_ff_expert
    L = cfg.n_moe_layers
    if cfg.tie_experts_across_layers:
        routed_total = cfg.n_routed_experts * expert
        routed_active = min(cfg.n_routed_experts, cfg.top_k * L) * expert
    else:
        routed_total = L * cfg.n_routed_experts * expert
        routed_active = L * cfg.top_k * expert
    return total, total - routed_total + routed_active


class MoETransformer:
    """Decoder whose first layer is a dense gated MLP and the rest MoE blocks."""

    def __init__(self, config: ModelConfig, params: Mapping[str, Tensor] | None = None,
                 seed: int = 0):
        self.config = config
        if params is None:
            params = init_params(config, seed)
        expected = parameter_shapes(config)
        missing = [n for n, _ in expected if n not in params]
        if missing:
            raise InputError(f"missing parameters: {missing[:5]}")
        for name, shape in expected:
            if params[name].shape != shape:
                raise DimensionError(f"{name}: shape {params[name].shape} != {shape}")
        self.params = {name: params[name] for name, _ in expected}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def mlp(self, prefix: str) -> MLPWeights:
        return MLPWeights(*(self.params[f"{prefix}.{w}"] for w in _MLP))

    def attention(self, layer: int) -> AttentionWeights:
        p = f"layers.{layer}.attn"
        return AttentionWeights(*(self.params[f"{p}.{w}"] for w in ("wq", "wk", "wv", "wo")))

    def routed_experts(self, layer: int) -> list[MLPWeights]:
        return [self.mlp(_routed_prefix(self.config, layer, j))
                for j in range(self.config.n_routed_experts)]

    def shared_experts(self, layer: int) -> list[MLPWeights]:
        return [self.mlp(_shared_prefix(self.config, layer, s))
                for s in range(self.config.n_shared_experts)]

    def forward(self, ids, steering=None, positions=None):
        return model_forward(self, ids, steering=steering, positions=positions)

    __call__ = forward


def _steering_row(steering, moe_layer: int):
    if steering is None:
        return None
    if isinstance(steering, Mapping):
        return steering.get(moe_layer)
    return np.asarray(steering)[moe_layer]


def model_forward(model: MoETransformer, ids, steering=None, positions=None
                  ) -> tuple[Tensor, list[LayerActivationRecord]]:
    """Next-token logits for ``ids`` of shape (B, T) or (T,).

    ``steering`` is either an (n_moe_layers, n_routed_experts) bias matrix or
    a mapping from MoE-layer ordinal to a bias vector.
    """
    cfg = model.config
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise InputError(f"token ids must be integers, got dtype {ids.dtype}")
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise InputError(f"token id out of range [0, {cfg.vocab_size})")
    B, L = ids.shape
    P = model.params
    x = P["embed"][ids]
    records: list[LayerActivationRecord] = []
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        a = T.rms_norm(x, P[f"{pre}.attn_norm"], cfg.norm_eps)
        x = x + attention_forward(a, positions, model.attention(i), cfg)
        m = T.rms_norm(x, P[f"{pre}.mlp_norm"], cfg.norm_eps).reshape(B * L, cfg.d_model)
        if i == 0:
            y = gated_mlp(m, model.mlp(f"{pre}.mlp"))
        else:
            y, rec = moe_forward(m, model.routed_experts(i), model.shared_experts(i),
                                 P[f"{pre}.router"], cfg, _steering_row(steering, i - 1),
                                 layer=i - 1)
            records.append(rec)
        x = x + y.reshape(B, L, cfg.d_model)
    x = T.rms_norm(x, P["final_norm"], cfg.norm_eps)
    logits = T.matmul(x, P["lm_head"])
    if single:
        logits = logits.reshape(L, cfg.vocab_size)
    return logits, records


def generate(model: MoETransformer, prompt_ids, max_new_tokens: int, steering=None,
             temperature: float = 0.0, seed: int = 0):
    """Extend ``prompt_ids`` token by token (greedy when temperature is 0).

    Returns the new tokens and the activation records of the final forward.
    """
    rng = np.random.default_rng(seed)
    ids = [int(t) for t in prompt_ids]
    if not ids:
        raise InputError("generation needs a non-empty prompt")
    records: list[LayerActivationRecord] = []
    with no_grad():
        for _ in range(max_new_tokens):
            window = ids[-model.config.context_len:]
            logits, records = model_forward(model, np.array(window), steering=steering)
            last = logits.data[-1]
            if temperature <= 0:
                nxt = int(np.argmax(last))
            else:
                z = last / temperature
                p = np.exp(z - z.max())
                nxt = int(rng.choice(len(p), p=p / p.sum()))
            ids.append(nxt)
    return ids[len(prompt_ids):], records

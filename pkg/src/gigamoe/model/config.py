from __future__ import annotations

from dataclasses import dataclass, replace

from ..errors import ConfigError
from ..kvtext import load_kv_file, from_kv, parse_kv, to_kv

GATE_MODES = ("sigmoid-unnormalized", "softmax-topk-unnormalized", "softmax-renormalized")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of a desk-scale shared+routed expert decoder.

    Layer 0 is a dense gated MLP; every later layer is an MoE block. The
    defaults keep the reference model's ratios (2 shared experts, 2:1 query
    to key/value heads, first-layer MLP twice the expert width) at a size
    that trains on a CPU.
    """

    vocab_size: int = 512
    d_model: int = 256
    n_layers: int = 6
    n_heads: int = 8
    n_kv_heads: int = 4
    n_shared_experts: int = 2
    n_routed_experts: int = 8
    top_k: int = 2
    d_ff_expert: int = 448
    d_ff_first: int = 896
    rope_base: float = 10_000.0
    context_len: int = 8192
    tie_experts_across_layers: bool = False
    tie_shared_experts_across_layers: bool = False
    gate_mode: str = "sigmoid-unnormalized"
    norm_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "n_kv_heads",
                     "n_routed_experts", "top_k", "d_ff_expert", "d_ff_first", "context_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_shared_experts < 0:
            raise ConfigError("n_shared_experts must be non-negative")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(
                f"n_heads ({self.n_heads}) must be a multiple of n_kv_heads ({self.n_kv_heads})")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model ({self.d_model}) not divisible by n_heads ({self.n_heads})")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim {self.head_dim} must be even for rotary embeddings")
        if not 1 <= self.top_k <= self.n_routed_experts:
            raise ConfigError(
                f"top_k ({self.top_k}) must lie in [1, n_routed_experts={self.n_routed_experts}]")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")
        if self.rope_base <= 0:
            raise ConfigError("rope_base must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_moe_layers(self) -> int:
        return self.n_layers - 1

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_text(self) -> str:
        return to_kv(self)

    @classmethod
    def from_text(cls, text: str, env_prefix: str | None = None) -> "ModelConfig":
        return from_kv(cls, parse_kv(text), env_prefix)

    @classmethod
    def load(cls, path, env_prefix: str | None = None) -> "ModelConfig":
        return load_kv_file(cls, path, env_prefix)


def tiny_config(**overrides) -> ModelConfig:
    """A very small config for gradient checks and fast tests."""
    base = dict(vocab_size=32, d_model=8, n_layers=3, n_heads=2, n_kv_heads=1,
                n_shared_experts=1, n_routed_experts=4, top_k=2, d_ff_expert=6,
                d_ff_first=12, context_len=64, init_std=0.5)
    base.update(overrides)
    return ModelConfig(**base)

"""Training objectives: next-token cross-entropy, router load balancing and
the weighted preference loss with a trailing chosen log-ratio term."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import tensor as T
from ..errors import ConfigError, InputError
from ..model.layers import LayerActivationRecord
from ..tensor import Tensor


def load_balancing_loss(records: Sequence[LayerActivationRecord]) -> Tensor:
    """Switch-style auxiliary loss ``N * sum_i f_i * P_i``, averaged over records.

    ``f_i`` is the share of top-k assignments that went to expert ``i`` and
    ``P_i`` the mean router probability of expert ``i``. Equals 1 when both
    are uniform and N when everything lands on one expert with certainty.
    Gradients flow through ``P`` only.
    """
    if not records or all(r.n_tokens == 0 for r in records):
        raise InputError("load balancing loss needs at least one routed token")
    total = None
    used = 0
    for rec in records:
        if rec.n_tokens == 0:
            continue
        n_experts = rec.probs.shape[-1]
        counts = np.bincount(rec.selected.reshape(-1), minlength=n_experts)
        frac = counts / counts.sum()
        mean_prob = rec.probs.mean(axis=0)
        term = T.tsum(mean_prob * frac) * float(n_experts)
        total = term if total is None else total + term
        used += 1
    return total * (1.0 / used)


def sft_loss(logits, targets, mask=None) -> Tensor:
    """Mean next-token negative log-likelihood over positions where ``mask`` is true."""
    logits = T.as_tensor(logits)
    V = logits.shape[-1]
    flat = logits.reshape(-1, V)
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != flat.shape[0]:
        raise InputError(f"{targets.shape[0]} targets for {flat.shape[0]} positions")
    keep = np.ones_like(targets, dtype=bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        raise InputError("every position is masked; nothing to score")
    logp = T.log_softmax(flat[idx], axis=-1)
    picked = logp[np.arange(idx.size), targets[idx]]
    return -picked.mean()


# -- preference optimisation -------------------------------------------

@dataclass(frozen=True)
class DPOConfig:
    """Weights of the preference loss.

    ``beta_w`` scales the chosen log-ratio and ``beta_l`` the rejected one
    inside the sigmoid. The trailing chosen log-ratio term is multiplied by
    ``nll_term_coefficient`` and additionally negated when
    ``negate_nll_term`` is set.
    """

    beta_w: float = 0.2
    beta_l: float = 0.1
    nll_term_coefficient: float = 1.0
    negate_nll_term: bool = False

    def __post_init__(self):
        if self.beta_w <= 0 or self.beta_l <= 0:
            raise ConfigError("beta_w and beta_l must be positive")

    @property
    def trailing_coefficient(self) -> float:
        return -self.nll_term_coefficient if self.negate_nll_term else self.nll_term_coefficient


@dataclass
class PreferencePair:
    """One (prompt, chosen, rejected) triple with per-token completion log-probs.

    Log-prob fields may be arrays or Tensors (the policy side usually carries
    a graph during training).
    """

    prompt: Sequence[int]
    chosen: Sequence[int]
    rejected: Sequence[int]
    policy_chosen_logps: object
    policy_rejected_logps: object
    ref_chosen_logps: object
    ref_rejected_logps: object

    def __post_init__(self):
        for name, toks in (("chosen", self.chosen), ("rejected", self.rejected)):
            for side in ("policy", "ref"):
                lp = T.as_tensor(getattr(self, f"{side}_{name}_logps"))
                if lp.shape != (len(toks),):
                    raise InputError(
                        f"{side} {name} log-probs have shape {lp.shape}, "
                        f"expected ({len(toks)},)")
                if np.any(lp.data > 0):
                    raise InputError(f"{side} {name} log-probs must be <= 0")

    def log_ratios(self) -> tuple[Tensor, Tensor]:
        """Sequence-level ``log pi_theta - log pi_ref`` for chosen and rejected."""
        r_w = T.tsum(T.as_tensor(self.policy_chosen_logps)) - float(
            np.sum(T.as_tensor(self.ref_chosen_logps).data))
        r_l = T.tsum(T.as_tensor(self.policy_rejected_logps)) - float(
            np.sum(T.as_tensor(self.ref_rejected_logps).data))
        return r_w, r_l


def dpo_loss_from_ratios(r_w, r_l, config: DPOConfig) -> Tensor:
    """Batch mean of ``-log sigmoid(beta_w r_w - beta_l r_l) + c * r_w``."""
    r_w, r_l = T.as_tensor(r_w), T.as_tensor(r_l)
    if r_w.shape != r_l.shape:
        raise InputError(f"ratio shapes differ: {r_w.shape} vs {r_l.shape}")
    z = r_w * config.beta_w - r_l * config.beta_l
    per_pair = -T.log_sigmoid(z) + r_w * config.trailing_coefficient
    return per_pair.mean()


def dpo_loss(pairs: Sequence[PreferencePair], config: DPOConfig) -> Tensor:
    if not pairs:
        raise InputError("empty preference batch")
    ratios = [p.log_ratios() for p in pairs]
    r_w = T.concat([r.reshape(1) for r, _ in ratios])
    r_l = T.concat([r.reshape(1) for _, r in ratios])
    return dpo_loss_from_ratios(r_w, r_l, config)


def completion_logprobs(model, prompt: Sequence[int], completion: Sequence[int]) -> Tensor:
    """Per-token log-probs of ``completion`` given ``prompt`` under ``model``."""
    if not prompt:
        raise InputError("prompt must contain at least one token")
    if not completion:
        raise InputError("completion must contain at least one token")
    ids = np.asarray(list(prompt) + list(completion))
    logits, _ = model(ids[:-1])
    start = len(prompt) - 1
    logp = T.log_softmax(logits[start:], axis=-1)
    return logp[np.arange(len(completion)), np.asarray(completion)]

"""Seeded training loops for next-token pre-training and preference tuning."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence, TextIO

import numpy as np

from ..errors import ConfigError, InputError, NumericalError
from ..kvtext import from_kv, load_kv_file, parse_kv, to_kv
from ..model.checkpoint import save_checkpoint
from ..model.transformer import MoETransformer
from ..routing.telemetry import RoutingTrace, h_sparsity, h_utilization
from ..tensor import no_grad
from .losses import DPOConfig, PreferencePair, completion_logprobs, dpo_loss, load_balancing_loss, sft_loss
from .optim import AdamW, AdamWSpec
from .schedules import CosineScheduleSpec, MultiStepScheduleSpec, schedule_fn

log = logging.getLogger(__name__)

SCHEDULES = ("multistep", "cosine", "constant")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs besides the model config and the data."""

    schedule: str = "multistep"
    base_lr: float = 3e-3
    min_lr: float = 0.0
    warmup_steps: int = 20
    total_steps: int = 500
    drop_fractions: tuple[float, ...] = (0.30, 0.60, 0.90, 0.98)
    drop_factor: float = 0.25
    batch_size: int = 4
    seq_len: int = 32
    seed: int = 0
    aux_loss_weight: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    checkpoints_per_epoch: int = 2
    beta_w: float = 0.2
    beta_l: float = 0.1
    nll_term_coefficient: float = 1.0
    negate_nll_term: bool = False

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.batch_size < 1 or self.seq_len < 1 or self.total_steps < 1:
            raise ConfigError("batch_size, seq_len and total_steps must be positive")
        if self.aux_loss_weight < 0:
            raise ConfigError("aux_loss_weight must be non-negative")
        if self.checkpoints_per_epoch < 1:
            raise ConfigError("checkpoints_per_epoch must be at least 1")
        self.schedule_spec()  # validate eagerly

    def schedule_spec(self):
        if self.schedule == "multistep":
            return MultiStepScheduleSpec(self.warmup_steps, self.total_steps, self.base_lr,
                                         self.drop_fractions, self.drop_factor)
        if self.schedule == "constant":
            return MultiStepScheduleSpec(self.warmup_steps, self.total_steps, self.base_lr, ())
        return CosineScheduleSpec(self.warmup_steps, self.total_steps, self.base_lr, self.min_lr)

    def optimizer_spec(self) -> AdamWSpec:
        return AdamWSpec((self.beta1, self.beta2), self.adam_eps, self.weight_decay,
                         self.grad_clip if self.grad_clip > 0 else None)

    def dpo_config(self) -> DPOConfig:
        return DPOConfig(self.beta_w, self.beta_l, self.nll_term_coefficient, self.negate_nll_term)

    def to_text(self) -> str:
        return to_kv(self)

    @classmethod
    def from_text(cls, text: str, env_prefix: str | None = None) -> "TrainConfig":
        return from_kv(cls, parse_kv(text), env_prefix)

    @classmethod
    def load(cls, path, env_prefix: str | None = None) -> "TrainConfig":
        return load_kv_file(cls, path, env_prefix)


class BatchStream:
    """Non-overlapping windows of ``seq_len + 1`` tokens, reshuffled every
    epoch by a generator derived from ``seed``."""

    def __init__(self, tokens, batch_size: int, seq_len: int, seed: int):
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.batch_size, self.seq_len = batch_size, seq_len
        n_windows = (len(self.tokens) - 1) // seq_len
        self.starts = np.arange(n_windows) * seq_len
        self.steps_per_epoch = n_windows // batch_size
        if self.steps_per_epoch < 1:
            raise InputError(
                f"corpus of {len(self.tokens)} tokens is too small for batches of "
                f"{batch_size} x {seq_len + 1}")
        self.rng = np.random.default_rng(seed)

    def __iter__(self) -> Iterator[tuple[int, np.ndarray]]:
        epoch = 0
        while True:
            order = self.rng.permutation(self.starts)
            for b in range(self.steps_per_epoch):
                starts = order[b * self.batch_size:(b + 1) * self.batch_size]
                idx = starts[:, None] + np.arange(self.seq_len + 1)
                yield epoch, self.tokens[idx]
            epoch += 1


TELEMETRY_HEADER = "step\tlr\tloss\taux_loss\tH_utilization\tH_sparsity"


@dataclass
class StepTelemetry:
    step: int
    lr: float
    loss: float
    aux_loss: float
    h_utilization: float
    h_sparsity: float

    def line(self) -> str:
        return (f"{self.step}\t{self.lr:.6e}\t{self.loss:.6f}\t{self.aux_loss:.6f}\t"
                f"{self.h_utilization:.6f}\t{self.h_sparsity:.6f}")


@dataclass
class TrainResult:
    telemetry: list[StepTelemetry] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    per_layer_h_utilization: list[float] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [t.loss for t in self.telemetry]


def _router_snapshot(records) -> dict:
    trace = RoutingTrace.from_records("step", records)
    return {f"layer{i}": (round(h_utilization(trace, i), 4), round(h_sparsity(trace, i), 4))
            for i in range(trace.n_layers)}


def train_loop(model: MoETransformer, tokens, config: TrainConfig, out_dir=None,
               telemetry: TextIO | None = None,
               on_step: Callable[[StepTelemetry], None] | None = None) -> TrainResult:
    """Next-token training with the auxiliary load-balancing loss.

    Checkpoints go to ``out_dir`` ``checkpoints_per_epoch`` times per epoch and
    once more at the end (``final.ckpt``). ``telemetry`` receives one
    tab-separated line per step.
    """
    stream = BatchStream(tokens, config.batch_size, config.seq_len, config.seed)
    lr_fn = schedule_fn(config.schedule_spec())
    opt = AdamW(model.parameters(), config.optimizer_spec())
    save_every = max(1, stream.steps_per_epoch // config.checkpoints_per_epoch)
    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult()
    if telemetry is not None:
        telemetry.write(TELEMETRY_HEADER + "\n")
    batches = iter(stream)
    for step in range(1, config.total_steps + 1):
        _, batch = next(batches)
        lr = lr_fn(step)
        opt.zero_grad()
        logits, records = model(batch[:, :-1])
        ce = sft_loss(logits, batch[:, 1:])
        aux = load_balancing_loss(records) if records else None
        loss = ce + aux * config.aux_loss_weight if aux is not None else ce
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(
                f"non-finite loss {value} at step {step} (lr {lr:.3e}); "
                f"router entropy snapshot {_router_snapshot(records)}")
        loss.backward()
        opt.step(lr)
        trace = RoutingTrace.from_records(f"step{step}", records) if records else None
        L = trace.n_layers if trace else 0
        hu = [h_utilization(trace, i) for i in range(L)]
        hs = [h_sparsity(trace, i) for i in range(L)]
        row = StepTelemetry(step, lr, value, aux.item() if aux is not None else 0.0,
                            float(np.mean(hu)) if hu else 1.0, float(np.mean(hs)) if hs else 1.0)
        result.telemetry.append(row)
        result.per_layer_h_utilization = hu
        if telemetry is not None:
            telemetry.write(row.line() + "\n")
        if on_step is not None:
            on_step(row)
        if out is not None and step % save_every == 0:
            path = out / f"step{step:07d}.ckpt"
            save_checkpoint(path, model.config, model.params, {"step": step, "seed": config.seed})
            result.checkpoints.append(path)
    if out is not None:
        path = out / "final.ckpt"
        save_checkpoint(path, model.config, model.params,
                        {"step": config.total_steps, "seed": config.seed})
        result.checkpoints.append(path)
    return result


# -- preference tuning ------------------------------------------------------

@dataclass
class TokenizedPreference:
    prompt: list[int]
    chosen: list[int]
    rejected: list[int]


def dpo_train_loop(policy: MoETransformer, reference: MoETransformer,
                   data: Sequence[TokenizedPreference], config: TrainConfig, out_dir=None,
                   telemetry: TextIO | None = None) -> TrainResult:
    """Preference tuning of ``policy`` against a frozen ``reference``.

    Reference log-probs are computed once up front. Each step draws
    ``batch_size`` pairs in a seeded order.
    """
    if not data:
        raise InputError("no preference pairs")
    dcfg = config.dpo_config()
    with no_grad():
        ref = [(completion_logprobs(reference, d.prompt, d.chosen).data.copy(),
                completion_logprobs(reference, d.prompt, d.rejected).data.copy()) for d in data]
    lr_fn = schedule_fn(config.schedule_spec())
    opt = AdamW(policy.parameters(), config.optimizer_spec())
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = max(1, len(data) // config.batch_size)
    save_every = max(1, steps_per_epoch // config.checkpoints_per_epoch)
    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult()
    if telemetry is not None:
        telemetry.write("step\tlr\tloss\n")
    order: list[int] = []
    for step in range(1, config.total_steps + 1):
        if len(order) < config.batch_size:
            order += rng.permutation(len(data)).tolist()
        picked, order = order[:config.batch_size], order[config.batch_size:]
        lr = lr_fn(step)
        opt.zero_grad()
        pairs = []
        for i in picked:
            d = data[i]
            pairs.append(PreferencePair(
                d.prompt, d.chosen, d.rejected,
                completion_logprobs(policy, d.prompt, d.chosen),
                completion_logprobs(policy, d.prompt, d.rejected), ref[i][0], ref[i][1]))
        loss = dpo_loss(pairs, dcfg)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite preference loss {value} at step {step} (lr {lr:.3e})")
        loss.backward()
        opt.step(lr)
        result.telemetry.append(StepTelemetry(step, lr, value, 0.0, float("nan"), float("nan")))
        if telemetry is not None:
            telemetry.write(f"{step}\t{lr:.6e}\t{value:.6f}\n")
        if out is not None and step % save_every == 0:
            path = out / f"dpo_step{step:07d}.ckpt"
            save_checkpoint(path, policy.config, policy.params, {"step": step, "seed": config.seed})
            result.checkpoints.append(path)
    if out is not None:
        path = out / "dpo_final.ckpt"
        save_checkpoint(path, policy.config, policy.params,
                        {"step": config.total_steps, "seed": config.seed})
        result.checkpoints.append(path)
    return result

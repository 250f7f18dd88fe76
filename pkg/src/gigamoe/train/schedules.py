from __future__ import annotations

import math
from dataclasses import dataclass

from ..errors import RangeError, ScheduleError


@dataclass(frozen=True)
class MultiStepScheduleSpec:
    """Linear warmup, then a constant rate cut by ``drop_factor`` at each
    milestone ``round(fraction * total_steps)``."""

    warmup_steps: int = 2000
    total_steps: int = 100_000
    base_lr: float = 1e-4
    drop_fractions: tuple[float, ...] = (0.30, 0.60, 0.90, 0.98)
    drop_factor: float = 0.25

    def __post_init__(self):
        fr = tuple(self.drop_fractions)
        object.__setattr__(self, "drop_fractions", fr)
        if self.base_lr <= 0:
            raise ScheduleError("base_lr must be positive")
        if self.total_steps < 1 or self.warmup_steps < 0:
            raise ScheduleError("total_steps must be positive and warmup_steps non-negative")
        if any(not 0 < f <= 1 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            raise ScheduleError(f"drop_fractions must increase strictly within (0, 1]: {fr}")
        if fr and self.warmup_steps >= self.milestones[0]:
            raise ScheduleError(
                f"warmup ({self.warmup_steps}) must end before the first drop ({self.milestones[0]})")

    @property
    def milestones(self) -> tuple[int, ...]:
        return tuple(int(round(f * self.total_steps)) for f in self.drop_fractions)


def lr_at(spec: MultiStepScheduleSpec, step: int) -> float:
    if not 0 <= step <= spec.total_steps:
        raise RangeError(f"step {step} outside [0, {spec.total_steps}]")
    if step < spec.warmup_steps:
        return spec.base_lr * step / spec.warmup_steps
    drops = sum(step >= m for m in spec.milestones)
    return spec.base_lr * spec.drop_factor ** drops


@dataclass(frozen=True)
class CosineScheduleSpec:
    warmup_steps: int = 200
    max_steps: int = 7900
    base_lr: float = 1e-6
    min_lr: float = 0.0

    def __post_init__(self):
        if self.max_steps <= self.warmup_steps:
            raise ScheduleError("max_steps must exceed warmup_steps")
        if self.base_lr <= 0 or self.min_lr < 0 or self.min_lr > self.base_lr:
            raise ScheduleError("need 0 <= min_lr <= base_lr and base_lr > 0")


def cosine_lr_at(spec: CosineScheduleSpec, step: int) -> float:
    if not 0 <= step <= spec.max_steps:
        raise RangeError(f"step {step} outside [0, {spec.max_steps}]")
    if step < spec.warmup_steps:
        return spec.base_lr * step / spec.warmup_steps
    progress = (step - spec.warmup_steps) / (spec.max_steps - spec.warmup_steps)
    return spec.min_lr + 0.5 * (spec.base_lr - spec.min_lr) * (1.0 + math.cos(math.pi * progress))


def schedule_fn(spec):
    """Bind a schedule spec to a ``step -> lr`` callable."""
    if isinstance(spec, MultiStepScheduleSpec):
        return lambda step: lr_at(spec, step)
    if isinstance(spec, CosineScheduleSpec):
        return lambda step: cosine_lr_at(spec, step)
    raise ScheduleError(f"unknown schedule spec {type(spec).__name__}")

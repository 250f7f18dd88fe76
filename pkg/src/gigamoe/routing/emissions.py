from __future__ import annotations

from dataclasses import dataclass

from ..errors import InputError


@dataclass(frozen=True)
class EmissionsInput:
    pue: float        # power usage effectiveness, dimensionless
    kwh: float        # energy drawn by the hardware
    intensity: float  # grams CO2 per kWh of the grid


def co2_estimate(inp: EmissionsInput) -> float:
    """Kilograms of CO2: ``pue * kwh * intensity / 1000``."""
    for name in ("pue", "kwh", "intensity"):
        if not getattr(inp, name) >= 0:
            raise InputError(f"{name} must be non-negative, got {getattr(inp, name)}")
    if inp.pue < 1:
        raise InputError(f"pue is total facility energy over IT energy and cannot be below 1, "
                         f"got {inp.pue}")
    return inp.pue * inp.kwh * inp.intensity / 1000.0

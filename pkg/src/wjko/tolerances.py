"""Central numerical tolerances."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ToleranceConfig:
    metric: float = 1e-9
    mass: float = 1e-12
    marginal: float = 1e-10
    inner_slack: float = 1e-6
    kernel_margin: float = 1e-6
    support: float = 1e-12


TOL = ToleranceConfig()

"""Fixed-step ODE integration of a velocity field."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Collection

import numpy as np

from .velocity import DivergenceError

METHODS = ("euler", "rk4")


@dataclass
class IntegrationConfig:
    method: str = "rk4"
    steps_per_unit_time: int = 100

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if int(self.steps_per_unit_time) < 1:
            raise ValueError("steps_per_unit_time must be at least 1")
        self.steps_per_unit_time = int(self.steps_per_unit_time)


def n_steps(t_start: float, t_end: float, cfg: IntegrationConfig) -> int:
    # guard against 100 * 0.3 == 30.000000000000004 adding a step
    return max(1, math.ceil(cfg.steps_per_unit_time * (t_end - t_start) - 1e-9))


def integrate(field: Callable, X0, t_start: float, t_end: float,
              cfg: IntegrationConfig | None = None) -> np.ndarray:
    """Integrate ``dx/dt = field(t, x)`` for every row of ``X0``.

    ``field`` is any callable taking ``(t, X)`` with ``X`` of shape (n, d),
    including a :class:`~contextflow.velocity.VelocityField`. A zero-length
    interval returns a copy of ``X0``.
    """
    cfg = cfg or IntegrationConfig()
    X = np.array(X0, dtype=float)
    if t_end == t_start:
        return X
    if t_end < t_start:
        raise ValueError(f"t_end ({t_end}) must not precede t_start ({t_start})")
    steps = n_steps(t_start, t_end, cfg)
    h = (t_end - t_start) / steps
    for k in range(steps):
        t = t_start + k * h
        if cfg.method == "euler":
            X = X + h * field(t, X)
        else:
            k1 = field(t, X)
            k2 = field(t + 0.5 * h, X + 0.5 * h * k1)
            k3 = field(t + 0.5 * h, X + 0.5 * h * k2)
            k4 = field(t + h, X + h * k3)
            X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(X)):
            raise DivergenceError(f"state became non-finite at integration step {k + 1} of {steps}")
    return X


def ivp_sample(field, dataset, target_index: int, cfg: IntegrationConfig | None = None) -> np.ndarray:
    """Push the first slice forward to the target slice's time."""
    if not 0 <= target_index < len(dataset):
        raise IndexError(f"target index {target_index} out of range")
    src = dataset[0]
    return integrate(field, src.expr, src.time, dataset[target_index].time, cfg)


def next_step_sample(field, dataset, target_index: int, cfg: IntegrationConfig | None = None,
                     unavailable: Collection[int] = ()) -> np.ndarray:
    """Push the immediately preceding slice forward to the target slice's time."""
    if not 1 <= target_index < len(dataset):
        raise IndexError(f"next-step sampling needs a target index in [1, {len(dataset) - 1}]")
    source = target_index - 1
    if source in set(unavailable):
        raise ValueError(f"preceding slice {source} is held out and unavailable")
    src, tgt = dataset[source], dataset[target_index]
    if not tgt.time > src.time:
        raise ValueError(f"zero-length interval between slices {source} and {target_index}")
    return integrate(field, src.expr, src.time, tgt.time, cfg)

"""SGD with momentum and a piecewise-constant learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    pass


@dataclass
class OptimState:
    learning_rate: float = 0.001
    momentum: float = 0.9
    # (step, multiplier): the multiplier of the last entry with step <= step_count applies
    lr_schedule: list[tuple[int, float]] = field(default_factory=list)
    step_count: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        self.lr_schedule = sorted((int(s), float(m)) for s, m in self.lr_schedule)

    def effective_lr(self, step: int | None = None) -> float:
        step = self.step_count if step is None else step
        mult = 1.0
        for boundary, m in self.lr_schedule:
            if boundary <= step:
                mult = m
            else:
                break
        return self.learning_rate * mult


def step_schedule(every: int, factor: float = 0.1, total: int = 0) -> list[tuple[int, float]]:
    """Multiply the rate by ``factor`` every ``every`` steps up to ``total``."""
    if every <= 0:
        return []
    return [(s, factor ** (s // every)) for s in range(every, max(total, every) + 1, every)]


def sgd_step(params: Iterable[tuple[str, Tensor]], state: OptimState) -> None:
    """One momentum step: ``v = momentum * v + grad``; ``p -= lr_eff * v``.

    Parameters with ``requires_grad=False`` are skipped untouched.
    """
    live = [(name, p) for name, p in params if p.requires_grad]
    for name, p in live:
        if p.grad is None:
            raise MissingGradError(f"parameter {name!r} has no gradient")
    lr = state.effective_lr()
    for name, p in live:
        v = state.velocity.get(name)
        if v is None or v.shape != p.data.shape:
            v = np.zeros_like(p.data)
        if state.momentum:
            v = state.momentum * v + p.grad
        else:
            v = p.grad.copy()
        state.velocity[name] = v
        p.data -= lr * v
    state.step_count += 1

"""AdamW with decoupled weight decay for the tensor engine."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor


@dataclass
class AdamWState:
    """Optimizer hyperparameters plus per-parameter moment buffers."""

    learning_rate: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.95
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
               state: AdamWState) -> None:
    """Apply one bias-corrected AdamW update in place.

    Parameters with a missing or ``None`` gradient are skipped entirely:
    no moment update and no weight decay, so an update in which nothing was
    differentiated leaves the model bit-identical. Iteration order is sorted
    by name, which keeps float accumulation reproducible.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        p = params[name]
        g = np.asarray(g, dtype=np.float32)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} mismatches parameter {name} {p.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
            state.first_moment[name] = m
            state.second_moment[name] = v
        elif m.shape != p.shape:
            raise ShapeError(f"moment shape {m.shape} mismatches parameter {name} {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        p.data -= state.learning_rate * (update + state.weight_decay * p.data)

"""Adam with bias correction."""
from dataclasses import dataclass, field

import numpy as np

from .graph import NonFiniteError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def copy(self):
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                         [a.copy() for a in self.m], [a.copy() for a in self.v])


def adam_step(params, grads, state):
    """Return ``(new_params, new_state)``; inputs are left untouched."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if state.step == 0 and not state.m:
        state = AdamState(state.lr, state.beta1, state.beta2, state.eps, 0,
                          [np.zeros_like(p, dtype=np.float64) for p in params],
                          [np.zeros_like(p, dtype=np.float64) for p in params])
    if len(state.m) != len(params):
        raise ValueError("Adam state does not match parameter list")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient passed to adam_step")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_params.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)

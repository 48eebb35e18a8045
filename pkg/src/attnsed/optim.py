"""Adam optimizer with bias correction.

State is kept per parameter tensor: first and second moment estimates plus
a shared step counter. The update is

    m <- b1*m + (1-b1)*g          v <- b2*v + (1-b2)*g^2
    m_hat = m / (1 - b1^t)        v_hat = v / (1 - b2^t)
    p <- p - lr * m_hat / (sqrt(v_hat) + eps)
"""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import NonFiniteError, StateError


class AdamState:
    """Moment buffers and hyperparameters for a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], learning_rate: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.first_moment: List[np.ndarray] = [np.zeros_like(p.data) for p in params]
        self.second_moment: List[np.ndarray] = [np.zeros_like(p.data) for p in params]
        self.step_count = 0
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """Apply one bias-corrected update in place; increments the step count."""
    if len(params) != len(state.first_moment):
        raise StateError(f"state tracks {len(state.first_moment)} tensors, got {len(params)}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise StateError(f"parameter {i} has no gradient; run backward first")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for i, p in enumerate(params):
        g = p.grad
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (state.learning_rate / bc1) * m / (np.sqrt(v / bc2) + state.epsilon)
        p.data -= update.astype(p.data.dtype)


class Adam:
    """Convenience wrapper pairing a parameter list with its AdamState."""

    def __init__(self, params: Sequence[Tensor], learning_rate: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(self.params, learning_rate, beta1, beta2, epsilon)

    def step(self):
        adam_step(self.params, self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def check_finite_grads(self):
        """Raise with a parameter-norm report if any gradient is non-finite."""
        bad = []
        for i, p in enumerate(self.params):
            if p.grad is not None and not np.isfinite(p.grad).all():
                bad.append(f"param[{i}] |p|={np.linalg.norm(p.data):.3e}")
        if bad:
            raise NonFiniteError("non-finite gradients: " + "; ".join(bad))

"""Adam optimizer: closed-form single step, convergence, and state guards."""

import numpy as np
import pytest

from attnsed import autodiff as ad
from attnsed.autodiff import Tensor
from attnsed.errors import NonFiniteError, StateError
from attnsed.optim import Adam, AdamState, adam_step


def test_first_step_matches_closed_form():
    # with zero-initialized moments, bias correction makes the first update
    # exactly lr * g / (|g| + eps) for any gradient g
    g = np.array([0.5, -2.0, 3.0])
    p = Tensor(np.zeros(3, dtype=np.float64), requires_grad=True)
    p.grad = g.copy()
    opt = Adam([p], learning_rate=0.1)
    opt.step()
    expect = -0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expect, atol=1e-9)


def test_two_steps_match_hand_rolled_update():
    rng = np.random.default_rng(0)
    g1, g2 = rng.normal(size=4), rng.normal(size=4)
    p = Tensor(np.zeros(4, dtype=np.float64), requires_grad=True)
    opt = Adam([p], learning_rate=0.01)

    m = v = np.zeros(4)
    x = np.zeros(4)
    for t, g in enumerate([g1, g2], start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)

    for g in [g1, g2]:
        p.grad = g.copy()
        opt.step()
        p.grad = None
    np.testing.assert_allclose(p.data, x, atol=1e-12)


def test_minimizes_quadratic():
    target = np.array([3.0, -1.0, 0.5])
    p = Tensor(np.zeros(3, dtype=np.float64), requires_grad=True)
    opt = Adam([p], learning_rate=0.05)
    for _ in range(600):
        opt.zero_grad()
        diff = p - Tensor(target)
        ad.tsum(diff * diff).backward()
        opt.step()
    np.testing.assert_allclose(p.data, target, atol=1e-3)


def test_step_without_gradient_is_an_error():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam([p])
    with pytest.raises(StateError):
        opt.step()


def test_state_parameter_count_mismatch():
    p = Tensor(np.zeros(2), requires_grad=True)
    q = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.ones(2, dtype=np.float32)
    q.grad = np.ones(2, dtype=np.float32)
    state = AdamState([p])
    with pytest.raises(StateError):
        adam_step([p, q], state)


def test_check_finite_grads_flags_nan():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam([p])
    p.grad = np.array([1.0, np.nan], dtype=np.float32)
    with pytest.raises(NonFiniteError):
        opt.check_finite_grads()
    p.grad = np.ones(2, dtype=np.float32)
    opt.check_finite_grads()  # clean grads pass silently


def test_zero_grad_clears_all():
    p = Tensor(np.zeros(2), requires_grad=True)
    q = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.ones(2, dtype=np.float32)
    q.grad = np.ones(2, dtype=np.float32)
    opt = Adam([p, q])
    opt.zero_grad()
    assert p.grad is None and q.grad is None

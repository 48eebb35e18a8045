"""Shared fixtures and numeric-oracle helpers for the test suite."""

import numpy as np
import pytest

from attnsed import autodiff as ad
from attnsed.autodiff import Tensor


def leaf(data, dtype=np.float64) -> Tensor:
    """Trainable float64 leaf for finite-difference verification."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, dtype=dtype)


def numeric_grad(build_loss, t: Tensor, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of build_loss() w.r.t. every entry of t.

    build_loss must recompute the forward pass from the tensors' current
    data so that perturbations take effect.
    """
    flat = t.data.reshape(-1)
    out = np.zeros_like(flat)
    with ad.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = build_loss().item()
            flat[i] = orig - eps
            lm = build_loss().item()
            flat[i] = orig
            out[i] = (lp - lm) / (2.0 * eps)
    return out.reshape(t.shape)


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst absolute deviation relative to the gradient's own scale."""
    analytic = np.asarray(analytic, dtype=np.float64)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def assert_grads_match(build_loss, tensors, eps: float = 1e-4,
                       tol: float = 1e-3) -> None:
    """Backward pass vs central finite differences for each tensor."""
    for t in tensors:
        t.zero_grad()
    loss = build_loss()
    loss.backward()
    for k, t in enumerate(tensors):
        assert t.grad is not None, f"tensor {k} received no gradient"
        num = numeric_grad(build_loss, t, eps)
        err = rel_err(t.grad, num)
        assert err < tol, f"tensor {k}: rel err {err:.3e} >= {tol}"


def projection_loss(out: Tensor, seed: int = 0) -> Tensor:
    """Scalar probe sum(W * out) with a fixed random W; exercises every
    output position with distinct weights."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ad.tsum(out * Tensor(w.astype(out.dtype.type)))


@pytest.fixture(scope="session")
def toy_model_config():
    from attnsed.model import ModelConfig
    return ModelConfig(conv_channels=(2, 2, 3, 3), gru_units=4,
                       temporal_attention_units=3, dropout_p=0.0)


@pytest.fixture(scope="session")
def desk_model_config():
    from attnsed.model import ModelConfig
    return ModelConfig(conv_channels=(8, 8, 16, 16))

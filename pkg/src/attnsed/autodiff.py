"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap a numpy array (float32 by default, float64 for high-precision
gradient verification) plus an optional gradient buffer. Operations build a
computation graph eagerly; calling ``backward()`` on a scalar loss runs the
tape in reverse topological order and accumulates gradients into every
reachable tensor that requires them.

The op set is exactly what the detection model needs: elementwise arithmetic
with broadcasting, 2-D matmul, 2-D convolution / max-pooling over
(channel, time, frequency) maps, batch normalization, a fused GRU cell,
dropout, activations, reductions, and a normalize-to-fixed-sum op used by
the attention layers. No GPU, no sparse storage, no general einsum.
"""

from __future__ import annotations

import contextlib
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, ParameterError, StateError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / replay)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional float array node in a computation graph.

    Leaf tensors created with ``requires_grad=True`` are trainable
    parameters; interior nodes remember their parents and a backward
    closure. ``data`` is always a C-contiguous numpy array.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._op = ""
        self._backward_done = False

    # -- basics -----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op or 'leaf'})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def assert_finite(self, what: str = "tensor"):
        if not np.isfinite(self.data).all():
            from .errors import NonFiniteError
            raise NonFiniteError(f"non-finite values in {what} (op={self._op or 'leaf'})")

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- backward ----------------------------------------------------------

    def backward(self):
        """Reverse-mode pass from a scalar loss.

        Gradients of tensors reached through several paths are summed.
        A graph can be walked once; rebuilding it (a fresh forward pass)
        is the reset.
        """
        if self.data.size != 1:
            raise DimensionError(f"backward requires a scalar, got shape {self.shape}")
        if self._backward_done:
            raise StateError("backward already ran on this graph; rebuild it with a new forward pass")
        self._backward_done = True

        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _topo_order(root: Tensor) -> list:
    # Iterative DFS: graphs from long recurrent sequences would overflow
    # the recursion limit.
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic -------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g, b.shape))
        out._backward = backward
    return out


def neg(a: Tensor) -> Tensor:
    out = _make(-a.data, (a,), "neg")
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(-g)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g * a.data, b.shape))
        out._backward = backward
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        out._backward = backward
    return out


def log(a: Tensor) -> Tensor:
    out = _make(np.log(a.data), (a,), "log")
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(g / a.data)
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only where unclamped."""
    out = _make(np.clip(a.data, lo, hi), (a,), "clip")
    if out.requires_grad:
        mask = ((a.data >= lo) & (a.data <= hi)).astype(a.dtype)
        out._backward = lambda g: a.accumulate_grad(g * mask)
    return out


# -- shape ops ---------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = _make(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(g.reshape(a.shape))
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), "transpose")
    if out.requires_grad:
        inv = tuple(np.argsort(axes))
        out._backward = lambda g: a.accumulate_grad(np.ascontiguousarray(g.transpose(inv)))
    return out


def select(a: Tensor, index: int, axis: int) -> Tensor:
    """Take a single index along ``axis`` (the axis is dropped)."""
    out = _make(np.ascontiguousarray(np.take(a.data, index, axis=axis)), (a,), "select")
    if out.requires_grad:
        def backward(g):
            full = np.zeros_like(a.data)
            sl = [slice(None)] * a.data.ndim
            sl[axis] = index
            full[tuple(sl)] = g
            a.accumulate_grad(full)
        out._backward = backward
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.stack([t.data for t in tensors], axis=axis)
    out = _make(data, tuple(tensors), "stack")
    if out.requires_grad:
        def backward(g):
            parts = np.moveaxis(g, axis, 0)
            for t, part in zip(tensors, parts):
                if t.requires_grad:
                    t.accumulate_grad(np.ascontiguousarray(part))
        out._backward = backward
    return out


# -- reductions ---------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def backward(g):
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g, a.shape).astype(a.dtype))
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                a.accumulate_grad(np.broadcast_to(g, a.shape).astype(a.dtype))
        out._backward = backward
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), _wrap(1.0 / n, a.dtype))


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient flows to the first maximum only."""
    data = a.data.max(axis=axis, keepdims=keepdims)
    out = _make(data, (a,), "max")
    if out.requires_grad:
        idx = a.data.argmax(axis=axis)  # argmax takes the first tie
        def backward(g):
            if not keepdims:
                g_exp = np.expand_dims(g, axis)
            else:
                g_exp = g
            full = np.zeros_like(a.data)
            np.put_along_axis(full, np.expand_dims(idx, axis),
                              np.ascontiguousarray(g_exp), axis=axis)
            a.accumulate_grad(full)
        out._backward = backward
    return out


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = _make(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)
        out._backward = backward
    return out


# -- activations ----------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = _make(np.maximum(a.data, 0), (a,), "relu")
    if out.requires_grad:
        mask = (a.data > 0).astype(a.dtype)
        out._backward = lambda g: a.accumulate_grad(g * mask)
    return out


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign for overflow safety in float32.
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(a.dtype)
    out = _make(s, (a,), "sigmoid")
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(g * s * (1.0 - s))
    return out


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = _make(t, (a,), "tanh")
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(g * (1.0 - t * t))
    return out


def softmax(a: Tensor, axis: int) -> Tensor:
    if axis >= a.data.ndim:
        raise ParameterError(f"softmax axis {axis} out of range for rank {a.data.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _make(s, (a,), "softmax")
    if out.requires_grad:
        def backward(g):
            dot = (g * s).sum(axis=axis, keepdims=True)
            a.accumulate_grad(s * (g - dot))
        out._backward = backward
    return out


def activation(a: Tensor, kind: str, axis: Optional[int] = None) -> Tensor:
    """Dispatch helper: kind is one of relu / sigmoid / tanh / softmax."""
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return tanh(a)
    if kind == "softmax":
        if axis is None:
            raise ParameterError("softmax needs an axis")
        return softmax(a, axis)
    raise ParameterError(f"unknown activation kind: {kind!r}")


# -- convolution / pooling --------------------------------------------------------

def _conv_pad(x: np.ndarray, kt: int, kf: int, st: int, sf: int, padding: str):
    _, _, t, f = x.shape
    if padding == "valid":
        return x, (0, 0)
    if padding != "same":
        raise ParameterError(f"padding must be 'same' or 'valid', got {padding!r}")
    out_t = -(-t // st)
    out_f = -(-f // sf)
    pad_t = max((out_t - 1) * st + kt - t, 0)
    pad_f = max((out_f - 1) * sf + kf - f, 0)
    lt, lf = pad_t // 2, pad_f // 2
    xp = np.pad(x, ((0, 0), (0, 0), (lt, pad_t - lt), (lf, pad_f - lf)))
    return xp, (lt, lf)


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None,
           stride=(1, 1), padding: str = "same") -> Tensor:
    """Cross-correlate (C_in, T, F) maps with (C_out, C_in, kT, kF) kernels.

    Accepts a leading batch axis. With 'same' padding and unit stride the
    spatial dims are preserved. The inner loops run over the (small) kernel
    footprint; each step is one BLAS contraction over every output position.
    """
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4:
        raise DimensionError(f"conv2d expects (B,)C,T,F input and 4-D kernels, got {x.shape} / {kernels.shape}")
    co, ci, kt, kf = kernels.shape
    if kt < 1 or kf < 1:
        raise DimensionError("kernel dims must be >= 1")
    st, sf = stride
    if st < 1 or sf < 1:
        raise DimensionError("stride must be >= 1")
    if xd.shape[1] != ci:
        raise DimensionError(f"input channels {xd.shape[1]} != kernel channels {ci}")

    xp, _ = _conv_pad(xd, kt, kf, st, sf, padding)
    b_, _, tp, fp = xp.shape
    if kt > tp or kf > fp:
        raise DimensionError(f"kernel ({kt},{kf}) larger than padded input ({tp},{fp})")
    out_t = (tp - kt) // st + 1
    out_f = (fp - kf) // sf + 1

    acc = np.zeros((b_, co, out_t, out_f), dtype=x.dtype)
    for i in range(kt):
        for j in range(kf):
            sl = xp[:, :, i:i + st * out_t:st, j:j + sf * out_f:sf]
            acc += np.einsum("oi,bitf->botf", kernels.data[:, :, i, j], sl, optimize=True)
    if bias is not None:
        acc += bias.data.reshape(1, co, 1, 1)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    out_data = acc[0] if squeeze else acc
    out = _make(out_data, parents, "conv2d")
    if out.requires_grad:
        def backward(g):
            g4 = g[None] if squeeze else g
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g4.sum(axis=(0, 2, 3)))
            if kernels.requires_grad:
                dk = np.zeros_like(kernels.data)
                for i in range(kt):
                    for j in range(kf):
                        sl = xp[:, :, i:i + st * out_t:st, j:j + sf * out_f:sf]
                        dk[:, :, i, j] = np.einsum("botf,bitf->oi", g4, sl, optimize=True)
                kernels.accumulate_grad(dk)
            if x.requires_grad:
                dxp = np.zeros_like(xp)
                for i in range(kt):
                    for j in range(kf):
                        dxp[:, :, i:i + st * out_t:st, j:j + sf * out_f:sf] += \
                            np.einsum("oi,botf->bitf", kernels.data[:, :, i, j], g4, optimize=True)
                # crop padding back off
                lt = (xp.shape[2] - xd.shape[2]) // 2
                lf = (xp.shape[3] - xd.shape[3]) // 2
                dx = dxp[:, :, lt:lt + xd.shape[2], lf:lf + xd.shape[3]]
                x.accumulate_grad(dx[0] if squeeze else dx)
        out._backward = backward
    return out


def maxpool2d(x: Tensor, window) -> Tensor:
    """Per-window max over (T, F); output dims are ceil-divided.

    Partial edge windows are padded with -inf. The gradient routes to the
    first maximum (lowest linear index) inside each window.
    """
    wt, wf = window
    if wt < 1 or wf < 1:
        raise DimensionError("pool window dims must be >= 1")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise DimensionError(f"maxpool2d expects (B,)C,T,F input, got {x.shape}")
    b_, c, t, f = xd.shape
    ot, of = -(-t // wt), -(-f // wf)
    pt, pf = ot * wt - t, of * wf - f
    xp = np.pad(xd, ((0, 0), (0, 0), (0, pt), (0, pf)), constant_values=-np.inf)
    win = xp.reshape(b_, c, ot, wt, of, wf).transpose(0, 1, 2, 4, 3, 5).reshape(b_, c, ot, of, wt * wf)
    idx = win.argmax(axis=-1)
    data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = _make(data[0] if squeeze else data, (x,), "maxpool2d")
    if out.requires_grad:
        def backward(g):
            g4 = g[None] if squeeze else g
            dwin = np.zeros_like(win)
            np.put_along_axis(dwin, idx[..., None], g4[..., None], axis=-1)
            dxp = dwin.reshape(b_, c, ot, of, wt, wf).transpose(0, 1, 2, 4, 3, 5).reshape(xp.shape)
            dx = dxp[:, :, :t, :f]
            x.accumulate_grad(dx if not squeeze else dx[0])
        out._backward = backward
    return out


# -- batch normalization -----------------------------------------------------------

class BatchNormState:
    """Running statistics for one batchnorm layer (per-channel)."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5,
                 dtype=DEFAULT_DTYPE):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.count = 0
        self.momentum = momentum
        self.eps = eps

    def astype(self, dtype) -> "BatchNormState":
        s = BatchNormState(len(self.running_mean), self.momentum, self.eps, dtype=dtype)
        s.running_mean = self.running_mean.astype(dtype)
        s.running_var = self.running_var.astype(dtype)
        s.count = self.count
        return s


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              mode: str) -> Tensor:
    """Normalize (B, C, T, F) per channel.

    Train mode uses batch statistics over batch x time x freq and updates
    the running stats by exponential moving average; eval mode uses the
    running stats and requires at least one prior training update.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm expects (B,C,T,F), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},)")
    eps = state.eps

    if mode == "train":
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean = (mom * state.running_mean + (1 - mom) * mean).astype(state.running_mean.dtype)
        state.running_var = (mom * state.running_var + (1 - mom) * var).astype(state.running_var.dtype)
        state.count += 1
    elif mode == "eval":
        if state.count == 0:
            raise StateError("batchnorm eval mode before any training update")
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
        m = 0
    else:
        raise ParameterError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")

    mean4 = mean.reshape(1, c, 1, 1)
    inv_std = 1.0 / np.sqrt(var + eps)
    inv4 = inv_std.reshape(1, c, 1, 1)
    xhat = (x.data - mean4) * inv4
    out = _make(gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1),
                (x, gamma, beta), "batchnorm")
    if out.requires_grad:
        def backward(g):
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dxhat = g * gamma.data.reshape(1, c, 1, 1)
                if mode == "eval":
                    x.accumulate_grad(dxhat * inv4)
                else:
                    # differentiate through the batch mean and variance
                    sum_dxhat = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    dx = (inv4 / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
                    x.accumulate_grad(dx.astype(x.dtype))
        out._backward = backward
    return out


# -- dropout ---------------------------------------------------------------------------

def dropout(x: Tensor, p: float, mode: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Zero elements with probability p in train mode, scaling survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if mode != "train":
        raise ParameterError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ParameterError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= p)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale
    out = _make(x.data * mask, (x,), "dropout")
    if out.requires_grad:
        out._backward = lambda g: x.accumulate_grad(g * mask)
    return out


# -- fused GRU cell ---------------------------------------------------------------------

def gru_cell(x: Tensor, h_prev: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """One gated-recurrent-unit step.

    Gate layout along the packed first axis of wx/wh/b is (update z,
    reset r, candidate n):

        z = sigmoid(Wz x + Uz h + bz)
        r = sigmoid(Wr x + Ur h + br)
        n = tanh(Wn x + bn + r * (Un h))
        h' = (1 - z) * n + z * h_prev

    Accepts a single step (x: (D,), h: (U,)) or a batch (x: (B,D),
    h: (B,U)). Backward is analytic; all six weight blocks, the bias,
    x and h_prev receive gradients.
    """
    squeeze = x.data.ndim == 1
    xd = x.data[None] if squeeze else x.data
    hd = h_prev.data[None] if squeeze else h_prev.data
    if xd.ndim != 2 or hd.ndim != 2:
        raise DimensionError("gru_cell expects rank-1 or rank-2 x and h_prev")
    u3, d = wx.shape
    if u3 % 3 != 0:
        raise DimensionError("wx first dim must be 3*units")
    u = u3 // 3
    if wh.shape != (u3, u) or b.shape != (u3,):
        raise DimensionError(f"inconsistent GRU parameter shapes: wx={wx.shape} wh={wh.shape} b={b.shape}")
    if xd.shape[1] != d or hd.shape[1] != u:
        raise DimensionError(f"gru_cell input dims: x={x.shape} h={h_prev.shape} vs wx={wx.shape}")

    ax = xd @ wx.data.T + b.data          # (B, 3U)
    ah = hd @ wh.data.T                   # (B, 3U)
    z = _sigmoid_np(ax[:, :u] + ah[:, :u])
    r = _sigmoid_np(ax[:, u:2 * u] + ah[:, u:2 * u])
    un_h = ah[:, 2 * u:]
    n = np.tanh(ax[:, 2 * u:] + r * un_h)
    h_new = (1.0 - z) * n + z * hd

    out = _make(h_new[0] if squeeze else h_new, (x, h_prev, wx, wh, b), "gru_cell")
    if out.requires_grad:
        def backward(g):
            gh = g[None] if squeeze else g
            dz = gh * (hd - n)
            dn = gh * (1.0 - z)
            dan = dn * (1.0 - n * n)
            dr = dan * un_h
            dun_h = dan * r
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            da_x = np.concatenate([daz, dar, dan], axis=1)      # grads of ax
            da_h = np.concatenate([daz, dar, dun_h], axis=1)    # grads of ah
            if wx.requires_grad:
                wx.accumulate_grad(da_x.T @ xd)
            if b.requires_grad:
                b.accumulate_grad(da_x.sum(axis=0))
            if wh.requires_grad:
                wh.accumulate_grad(da_h.T @ hd)
            if x.requires_grad:
                dx = da_x @ wx.data
                x.accumulate_grad(dx[0] if squeeze else dx)
            if h_prev.requires_grad:
                dh = da_h @ wh.data + gh * z
                h_prev.accumulate_grad(dh[0] if squeeze else dh)
        out._backward = backward
    return out


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# -- fixed-sum normalization (attention weights) -------------------------------------------

def normalize_weights(x: Tensor, axis: int, scale: float, eps: float = 1e-8,
                      uniform_fallback: bool = True) -> Tensor:
    """Rescale nonnegative weights so each slice along ``axis`` sums to ``scale``.

        out = scale * x / max(sum(x, axis), eps)

    Flooring the denominator (rather than adding eps to it) keeps the output
    sum exactly ``scale`` for any slice whose sum clears the floor; the sum
    and division run in 64-bit so each output is correctly rounded. A slice
    that is exactly all-zero (possible after a ReLU) would otherwise collapse
    to zero; with ``uniform_fallback`` it becomes all-ones and passes no
    gradient. Above the floor the denominator is differentiated through;
    below it the denominator is the constant ``eps``.
    """
    s = x.data.sum(axis=axis, keepdims=True, dtype=np.float64)
    denom = np.maximum(s, eps)
    clamped = s < eps
    data = (scale * x.data / denom).astype(x.dtype, copy=False)
    fallback = None
    if uniform_fallback:
        fallback = (s == 0.0)
        if fallback.any():
            data = np.where(np.broadcast_to(fallback, data.shape), np.ones_like(data), data)
        else:
            fallback = None
    out = _make(data, (x,), "normalize_weights")
    if out.requires_grad:
        def backward(g):
            dot = (g * data).sum(axis=axis, keepdims=True, dtype=np.float64)
            dx = (scale * g - np.where(clamped, 0.0, dot)) / denom
            if fallback is not None:
                dx = np.where(np.broadcast_to(fallback, dx.shape), 0.0, dx)
            x.accumulate_grad(dx.astype(x.dtype, copy=False))
        out._backward = backward
    return out

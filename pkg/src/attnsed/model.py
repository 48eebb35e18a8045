"""CRNN detector with temporal and frequential attention.

The network scores 80 ms segments of a clip for the presence of one target
event class. Input is a T x 128 log-mel matrix. A frequential attention
layer reweights the mel bands of every frame, a four-layer CNN with two
residual connections condenses time by 4x, a bidirectional GRU (directions
summed) plus a linear head produces one logit per segment, and a temporal
attention layer scales each logit before the final sigmoid:

    y_t = sigmoid(a_t * h_t)

Both attention paths normalize to a fixed sum (time weights sum to the
number of segments, band weights to the number of mel bands) so disabling
them is exactly the constant-1 weighting, which reduces the model to the
plain CRNN baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import CheckpointError, ConfigError, DimensionError

CHECKPOINT_MAGIC = b"TFAT"
CHECKPOINT_VERSION = 1

_ATTENTION_ACTIVATIONS = ("relu", "sigmoid", "softmax")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults give the full-size detector."""

    n_mels: int = 128
    n_conv_layers: int = 4
    conv_channels: tuple = (32, 32, 64, 64)
    kernel: tuple = (3, 3)
    pool_windows: tuple = ((1, 2), (2, 2), (2, 2), (1, 4))
    gru_units: int = 32
    temporal_attention_units: int = 32
    frequential_attention_units: int = 128
    dropout_p: float = 0.2
    ta_activation: str = "relu"
    fa_activation: str = "sigmoid"
    use_temporal_attention: bool = True
    use_frequential_attention: bool = True

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "pool_windows",
                           tuple((int(t), int(f)) for t, f in self.pool_windows))
        if self.n_mels < 1:
            raise ConfigError(f"n_mels must be positive, got {self.n_mels}")
        if self.n_conv_layers != 4:
            raise ConfigError("the CNN stack is fixed at 4 layers "
                              f"(two residual connections), got {self.n_conv_layers}")
        if len(self.conv_channels) != self.n_conv_layers:
            raise ConfigError(f"conv_channels needs {self.n_conv_layers} entries, "
                              f"got {len(self.conv_channels)}")
        if any(c < 1 for c in self.conv_channels):
            raise ConfigError("conv channel counts must be positive")
        if len(self.kernel) != 2 or any(k < 1 for k in self.kernel):
            raise ConfigError(f"kernel must be a (kT, kF) pair of positives, got {self.kernel}")
        if len(self.pool_windows) != self.n_conv_layers:
            raise ConfigError(f"pool_windows needs {self.n_conv_layers} entries, "
                              f"got {len(self.pool_windows)}")
        if any(t < 1 or f < 1 for t, f in self.pool_windows):
            raise ConfigError("pool window factors must be >= 1")
        time_factor = int(np.prod([t for t, _ in self.pool_windows]))
        if time_factor != 4:
            raise ConfigError("time pool factors must multiply to 4 "
                              f"(frames to segments), got {time_factor}")
        if self.gru_units < 1 or self.temporal_attention_units < 1:
            raise ConfigError("gru_units and temporal_attention_units must be positive")
        if self.frequential_attention_units != self.n_mels:
            raise ConfigError("frequential_attention_units must equal n_mels "
                              f"({self.n_mels}), got {self.frequential_attention_units}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must satisfy 0 <= p < 1, got {self.dropout_p}")
        for name, act in (("ta_activation", self.ta_activation),
                          ("fa_activation", self.fa_activation)):
            if act not in _ATTENTION_ACTIVATIONS:
                raise ConfigError(f"{name} must be one of {_ATTENTION_ACTIVATIONS}, got {act!r}")

    @property
    def freq_out(self) -> int:
        """Frequency bins surviving the pooling stack (ceil division per layer)."""
        f = self.n_mels
        for _, wf in self.pool_windows:
            f = -(-f // wf)
        return f

    @property
    def cnn_feature_dim(self) -> int:
        """Per-segment width after stacking channels along the frequency axis."""
        return self.conv_channels[-1] * self.freq_out

    def segments_for(self, n_frames: int) -> int:
        t = n_frames
        for wt, _ in self.pool_windows:
            t = -(-t // wt)
        return t

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f_.name for f_ in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


# Residual shortcuts run from the input of layers 2 and 4 (the outputs of
# layers 1 and 3) to those layers' activations.
_RESIDUAL_LAYERS = (1, 3)


class ModelParams:
    """Named parameter tensors plus batchnorm running statistics."""

    def __init__(self, config: ModelConfig, tensors: Dict[str, Tensor],
                 bn_states: Dict[str, BatchNormState]):
        self.config = config
        self.tensors = tensors
        self.bn_states = bn_states

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable(self) -> list:
        return list(self.tensors.values())

    def active(self) -> list:
        """Tensors the configured forward path actually uses (disabled
        attention branches never receive gradients)."""
        out = []
        for name, t in self.tensors.items():
            if name.startswith("ta_") and not self.config.use_temporal_attention:
                continue
            if name.startswith("fa_") and not self.config.use_frequential_attention:
                continue
            out.append(t)
        return out

    def named(self) -> Dict[str, Tensor]:
        return dict(self.tensors)

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()


def parameter_shapes(config: ModelConfig) -> Dict[str, tuple]:
    """The full name -> shape table implied by a configuration."""
    kt, kf = config.kernel
    shapes: Dict[str, tuple] = {}
    c_in = 1
    for i, c_out in enumerate(config.conv_channels):
        shapes[f"conv{i}_w"] = (c_out, c_in, kt, kf)
        shapes[f"conv{i}_b"] = (c_out,)
        shapes[f"bn{i}_gamma"] = (c_out,)
        shapes[f"bn{i}_beta"] = (c_out,)
        c_in = c_out
    for i in _RESIDUAL_LAYERS:
        src, dst = config.conv_channels[i - 1], config.conv_channels[i]
        if src != dst:
            shapes[f"res{i}_proj_w"] = (dst, src, 1, 1)
    d = config.cnn_feature_dim
    u = config.gru_units
    for direction in ("fwd", "bwd"):
        shapes[f"gru_{direction}_wx"] = (3 * u, d)
        shapes[f"gru_{direction}_wh"] = (3 * u, u)
        shapes[f"gru_{direction}_b"] = (3 * u,)
    shapes["fc_w"] = (u, 1)
    shapes["fc_b"] = (1,)
    shapes["ta_w"] = (config.temporal_attention_units, d)
    shapes["ta_b"] = (config.temporal_attention_units,)
    shapes["fa_w"] = (config.frequential_attention_units, config.n_mels)
    shapes["fa_b"] = (config.frequential_attention_units,)
    return shapes


ATTENTION_PREFIXES = ("ta_", "fa_")


def _init_tensor(name: str, shape: tuple, rng: np.random.Generator) -> Tensor:
    if name.endswith("_b") or name.endswith("_beta"):
        data = np.zeros(shape, dtype=np.float32)
    elif name.endswith("_gamma"):
        data = np.ones(shape, dtype=np.float32)
    else:
        # centered uniform with fan-in scaling; fan-in is everything past
        # the leading output axis
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
        limit = 1.0 / np.sqrt(max(fan_in, 1))
        data = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    return Tensor(data, requires_grad=True)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic random initialization; same seed, same parameters."""
    rng = np.random.default_rng(seed)
    tensors: Dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        tensors[name] = _init_tensor(name, shape, rng)
    bn_states = {f"bn{i}": BatchNormState(c) for i, c in enumerate(config.conv_channels)}
    return ModelParams(config, tensors, bn_states)


@dataclass
class ForwardTrace:
    """Everything a forward pass produces, attention weights included.

    Fields hold graph tensors so a loss built on ``probabilities`` can
    backpropagate. Single-clip traces drop the batch axis; batched traces
    keep it leading.
    """

    weighted_feature: Tensor
    frequential_weights: Tensor
    cnn_output: Tensor
    temporal_weights_raw: Tensor
    temporal_weights: Tensor
    logits: Tensor
    probabilities: Tensor


def frequential_attention(feat: Tensor, params: ModelParams):
    """Per-frame band weights M (each frame sums to n_mels) and M * F.

    feat is (B, T, n_mels). Returns (M, weighted) with the same shape.
    """
    cfg = params.config
    b, t, n_mels = feat.shape
    if n_mels != cfg.n_mels:
        raise DimensionError(f"expected {cfg.n_mels} mel bands, got {n_mels}")
    flat = ad.reshape(feat, (b * t, n_mels))
    act = ad.matmul(flat, ad.transpose(params["fa_w"], (1, 0))) + params["fa_b"]
    raw = ad.activation(act, cfg.fa_activation, axis=1)
    m_flat = ad.normalize_weights(raw, axis=1, scale=float(cfg.frequential_attention_units))
    m = ad.reshape(m_flat, (b, t, n_mels))
    return m, m * feat


def cnn_forward(x: Tensor, params: ModelParams, mode: str,
                rng: Optional[np.random.Generator] = None) -> Tensor:
    """Four conv blocks with residual shortcuts into layers 2 and 4.

    x is (B, T, n_mels); returns (B, C_last, T_seg, F'). Each block is
    conv -> batchnorm -> ReLU (+ shortcut) -> dropout -> maxpool.
    """
    cfg = params.config
    b, t, n_mels = x.shape
    h = ad.reshape(x, (b, 1, t, n_mels))
    for i in range(cfg.n_conv_layers):
        block_in = h
        h = ad.conv2d(h, params[f"conv{i}_w"], params[f"conv{i}_b"], padding="same")
        h = ad.batchnorm(h, params[f"bn{i}_gamma"], params[f"bn{i}_beta"],
                         params.bn_states[f"bn{i}"], mode)
        h = ad.relu(h)
        if i in _RESIDUAL_LAYERS:
            shortcut = block_in
            proj = params.tensors.get(f"res{i}_proj_w")
            if proj is not None:
                shortcut = ad.conv2d(shortcut, proj, padding="same")
            h = h + shortcut
        h = ad.dropout(h, cfg.dropout_p, mode, rng)
        h = ad.maxpool2d(h, cfg.pool_windows[i])
    return h


def stack_channels(c: Tensor) -> Tensor:
    """(B, C, T_seg, F') -> (B, T_seg, C*F'): channels stacked along frequency."""
    b, ch, t_seg, f = c.shape
    return ad.reshape(ad.transpose(c, (0, 2, 1, 3)), (b, t_seg, ch * f))


def temporal_attention(seq: Tensor, params: ModelParams):
    """Per-segment weights from the stacked CNN output.

    seq is (B, T_seg, D). Each segment's vector feeds N_t hidden units;
    the unit maximum is the raw weight, then each clip's weights are
    rescaled to sum to T_seg. An all-zero raw vector (possible with ReLU)
    falls back to uniform weights of 1.
    """
    cfg = params.config
    b, t_seg, d = seq.shape
    flat = ad.reshape(seq, (b * t_seg, d))
    act = ad.matmul(flat, ad.transpose(params["ta_w"], (1, 0))) + params["ta_b"]
    hidden = ad.activation(act, cfg.ta_activation, axis=1)
    raw = ad.reshape(ad.tmax(hidden, axis=1), (b, t_seg))
    weights = ad.normalize_weights(raw, axis=1, scale=float(t_seg))
    return raw, weights


def bigru_fc_forward(seq: Tensor, params: ModelParams) -> Tensor:
    """Bidirectional GRU with summed directions, then a scalar head.

    seq is (B, T_seg, D); returns per-segment logits (B, T_seg).
    """
    cfg = params.config
    b, t_seg, _ = seq.shape
    u = cfg.gru_units
    steps = [ad.select(seq, i, axis=1) for i in range(t_seg)]

    h = Tensor(np.zeros((b, u), dtype=seq.dtype))
    fwd = []
    for x_t in steps:
        h = ad.gru_cell(x_t, h, params["gru_fwd_wx"], params["gru_fwd_wh"],
                        params["gru_fwd_b"])
        fwd.append(h)

    h = Tensor(np.zeros((b, u), dtype=seq.dtype))
    bwd = [None] * t_seg
    for i in range(t_seg - 1, -1, -1):
        h = ad.gru_cell(steps[i], h, params["gru_bwd_wx"], params["gru_bwd_wh"],
                        params["gru_bwd_b"])
        bwd[i] = h

    summed = ad.stack(fwd, axis=1) + ad.stack(bwd, axis=1)      # (B, T_seg, U)
    flat = ad.reshape(summed, (b * t_seg, u))
    logits = ad.matmul(flat, params["fc_w"]) + params["fc_b"]
    return ad.reshape(logits, (b, t_seg))


def model_forward_batch(feat: Tensor, params: ModelParams, mode: str,
                        rng: Optional[np.random.Generator] = None) -> ForwardTrace:
    """Full forward pass over a (B, T, n_mels) batch."""
    cfg = params.config
    if feat.data.ndim != 3:
        raise DimensionError(f"batched forward expects (B, T, n_mels), got {feat.shape}")
    b, t, _ = feat.shape

    if cfg.use_frequential_attention:
        m, weighted = frequential_attention(feat, params)
    else:
        m = Tensor(np.ones(feat.shape, dtype=feat.dtype))
        weighted = feat

    c = cnn_forward(weighted, params, mode, rng)
    seq = stack_channels(c)
    t_seg = seq.shape[1]

    if cfg.use_temporal_attention:
        raw, a = temporal_attention(seq, params)
    else:
        raw = Tensor(np.ones((b, t_seg), dtype=feat.dtype))
        a = Tensor(np.ones((b, t_seg), dtype=feat.dtype))

    h = bigru_fc_forward(seq, params)
    y = ad.sigmoid(a * h)
    return ForwardTrace(weighted_feature=weighted, frequential_weights=m,
                        cnn_output=c, temporal_weights_raw=raw,
                        temporal_weights=a, logits=h, probabilities=y)


def model_forward(feat, params: ModelParams, mode: str = "eval",
                  rng: Optional[np.random.Generator] = None) -> ForwardTrace:
    """Forward pass over one clip; accepts a FeatureMatrix, array, or Tensor.

    The returned trace has no batch axis: weights and probabilities are
    1-D over segments, band weights are T x n_mels.
    """
    if isinstance(feat, Tensor):
        x = feat
    else:
        frames = feat.frames if hasattr(feat, "frames") else np.asarray(feat, dtype=np.float32)
        x = Tensor(frames)
    if x.data.ndim != 2:
        raise DimensionError(f"expected a T x n_mels matrix, got {x.shape}")
    batched = model_forward_batch(ad.reshape(x, (1,) + x.shape), params, mode, rng)
    takeone = lambda t: ad.select(t, 0, axis=0)
    return ForwardTrace(weighted_feature=takeone(batched.weighted_feature),
                        frequential_weights=takeone(batched.frequential_weights),
                        cnn_output=takeone(batched.cnn_output),
                        temporal_weights_raw=takeone(batched.temporal_weights_raw),
                        temporal_weights=takeone(batched.temporal_weights),
                        logits=takeone(batched.logits),
                        probabilities=takeone(batched.probabilities))


# -- checkpoint io ---------------------------------------------------------------

def _blob_items(params: ModelParams) -> Dict[str, np.ndarray]:
    blobs: Dict[str, np.ndarray] = {name: t.data for name, t in params.tensors.items()}
    for key, state in params.bn_states.items():
        blobs[f"{key}_running_mean"] = state.running_mean
        blobs[f"{key}_running_var"] = state.running_var
        blobs[f"{key}_count"] = np.array([state.count], dtype=np.float32)
    return blobs


def save_checkpoint(path, params: ModelParams) -> None:
    """Magic 'TFAT', u32 version, JSON config, then named f32 blobs."""
    cfg_bytes = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    blobs = _blob_items(params)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.array([CHECKPOINT_VERSION, len(cfg_bytes)], dtype="<u4").tobytes())
        fh.write(cfg_bytes)
        fh.write(np.array([len(blobs)], dtype="<u4").tobytes())
        for name in sorted(blobs):
            arr = np.ascontiguousarray(blobs[name], dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(np.array([len(nb)], dtype="<u4").tobytes())
            fh.write(nb)
            fh.write(np.array([arr.ndim] + list(arr.shape), dtype="<u4").tobytes())
            fh.write(arr.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> ModelParams:
    """Read a checkpoint and validate it against its own stored config."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
        version, cfg_len = np.frombuffer(_read_exact(fh, 8, "header"), dtype="<u4")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            cfg_dict = json.loads(_read_exact(fh, int(cfg_len), "config").decode("utf-8"))
            config = ModelConfig.from_dict(cfg_dict)
        except (ValueError, TypeError) as exc:
            raise CheckpointError(f"invalid checkpoint config: {exc}") from exc
        n_blobs = int(np.frombuffer(_read_exact(fh, 4, "blob count"), dtype="<u4")[0])
        blobs: Dict[str, np.ndarray] = {}
        for _ in range(n_blobs):
            name_len = int(np.frombuffer(_read_exact(fh, 4, "name length"), dtype="<u4")[0])
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            ndim = int(np.frombuffer(_read_exact(fh, 4, "rank"), dtype="<u4")[0])
            shape = tuple(int(d) for d in
                          np.frombuffer(_read_exact(fh, 4 * ndim, "shape"), dtype="<u4"))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 4 * count, f"data of {name}"), dtype="<f4")
            blobs[name] = data.reshape(shape).copy()

    expected = parameter_shapes(config)
    for i in range(config.n_conv_layers):
        c = config.conv_channels[i]
        expected[f"bn{i}_running_mean"] = (c,)
        expected[f"bn{i}_running_var"] = (c,)
        expected[f"bn{i}_count"] = (1,)
    missing = sorted(set(expected) - set(blobs))
    extra = sorted(set(blobs) - set(expected))
    wrong = sorted(name for name in set(expected) & set(blobs)
                   if tuple(blobs[name].shape) != tuple(expected[name]))
    if missing or extra or wrong:
        raise CheckpointError("checkpoint does not match its architecture: "
                              f"missing={missing} unexpected={extra} wrong_shape={wrong}")

    tensors = {name: Tensor(blobs[name], requires_grad=True)
               for name in parameter_shapes(config)}
    bn_states = {}
    for i, c in enumerate(config.conv_channels):
        state = BatchNormState(c)
        state.running_mean = blobs[f"bn{i}_running_mean"].astype(np.float32)
        state.running_var = blobs[f"bn{i}_running_var"].astype(np.float32)
        state.count = int(blobs[f"bn{i}_count"][0])
        bn_states[f"bn{i}"] = state
    return ModelParams(config, tensors, bn_states)


_SHARED_CONFIG_FIELDS = ("n_mels", "n_conv_layers", "conv_channels", "kernel",
                         "pool_windows", "gru_units", "dropout_p")


def load_pretrained_crnn(baseline_path, config: ModelConfig, seed: int) -> ModelParams:
    """Initialize an attention model from a trained plain-CRNN checkpoint.

    Conv, batchnorm, GRU and head weights (and batchnorm running stats) are
    copied; the attention layers get a fresh random init so their gradients
    are alive from the first step.
    """
    base = load_checkpoint(baseline_path)
    mismatched = [name for name in _SHARED_CONFIG_FIELDS
                  if getattr(base.config, name) != getattr(config, name)]
    if mismatched:
        raise CheckpointError("pretrained checkpoint architecture differs in: "
                              + ", ".join(mismatched))
    fresh = init_params(config, seed)
    for name, tensor in base.tensors.items():
        if name.startswith(ATTENTION_PREFIXES):
            continue
        fresh.tensors[name] = Tensor(tensor.data.copy(), requires_grad=True)
    fresh.bn_states = {key: state.astype(np.float32)
                       for key, state in base.bn_states.items()}
    return fresh

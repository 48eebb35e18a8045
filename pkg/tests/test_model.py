"""Detector model: shapes, attention invariants, reductions, checkpoints.

The gradient oracle re-runs the full forward pass in float64 ("replay") so
central differences are trustworthy, then compares sampled entries of every
parameter tensor against the backward pass.
"""

import numpy as np
import pytest

from attnsed import autodiff as ad
from attnsed.autodiff import Tensor
from attnsed.errors import CheckpointError, ConfigError, DimensionError
from attnsed.features import FeatureMatrix
from attnsed.model import (ATTENTION_PREFIXES, ModelConfig, ModelParams,
                           ForwardTrace, init_params, load_checkpoint,
                           load_pretrained_crnn, model_forward,
                           model_forward_batch, parameter_shapes,
                           save_checkpoint, stack_channels)

RNG = np.random.default_rng(777)


def params_as_float64(params: ModelParams) -> ModelParams:
    tensors = {name: Tensor(t.data.astype(np.float64), requires_grad=True)
               for name, t in params.tensors.items()}
    states = {key: s.astype(np.float64) for key, s in params.bn_states.items()}
    return ModelParams(params.config, tensors, states)


def sampled_fd_check(params: ModelParams, feat: np.ndarray, *, n_samples: int = 4,
                     eps: float = 1e-3, tol: float = 1e-2, seed: int = 0,
                     fine_eps: float = 1e-5, fine_tol: float = 1e-3):
    """Backward vs central differences on sampled entries of every tensor.

    The loss is a fixed random projection of the probabilities (train mode,
    so batch statistics are differentiated through). Central differences are
    only valid where the loss is locally smooth; a ReLU or max-pool kink
    inside the step makes the secant disagree with any correct gradient, so
    points where the two one-sided slopes disagree are re-measured with a
    smaller step (which shrinks the kink-capture radius) at a tighter
    tolerance. Returns the worst relative error seen.
    """
    p64 = params_as_float64(params)
    proj = np.random.default_rng(seed).normal(size=(feat.shape[0],
                                                    p64.config.segments_for(feat.shape[1])))

    def loss_value() -> float:
        trace = model_forward_batch(Tensor(feat), p64, mode="train")
        return ad.tsum(trace.probabilities * Tensor(proj)).item()

    def loss_graph():
        trace = model_forward_batch(Tensor(feat), p64, mode="train")
        return ad.tsum(trace.probabilities * Tensor(proj))

    p64.zero_grad()
    loss_graph().backward()
    with ad.no_grad():
        l0 = loss_value()

        def central(flat, i, step):
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_value()
            flat[i] = orig - step
            lm = loss_value()
            flat[i] = orig
            return lp, lm

        pick = np.random.default_rng(seed + 1)
        worst = 0.0
        for name, t in p64.tensors.items():
            assert t.grad is not None, f"{name} received no gradient"
            flat = t.data.reshape(-1)
            gflat = t.grad.reshape(-1)
            idx = pick.choice(flat.size, size=min(n_samples, flat.size), replace=False)
            for i in idx:
                lp, lm = central(flat, i, eps)
                s_plus = (lp - l0) / eps
                s_minus = (l0 - lm) / eps
                asym = abs(s_plus - s_minus) / max(abs(s_plus), abs(s_minus), 1e-8)
                if asym > 0.005:  # kink or strong curvature: the wide secant is off
                    lp, lm = central(flat, i, fine_eps)
                    num = (lp - lm) / (2.0 * fine_eps)
                    tol_i = fine_tol
                else:
                    num = (lp - lm) / (2.0 * eps)
                    tol_i = tol
                scale = max(abs(num), abs(gflat[i]), np.abs(gflat).max() * 1e-3, 1e-8)
                err = abs(gflat[i] - num) / scale
                worst = max(worst, err)
                assert err < tol_i, f"{name}[{i}]: analytic {gflat[i]:.6e} vs fd {num:.6e}"
    return worst


# -- configuration -------------------------------------------------------------------

def test_default_config_geometry():
    cfg = ModelConfig()
    assert cfg.freq_out == 128 // 32
    assert cfg.cnn_feature_dim == 64 * 4
    assert cfg.segments_for(1500) == 375
    assert cfg.segments_for(500) == 125
    assert cfg.segments_for(7) == 2  # ceil division at every pool


def test_config_round_trips_through_dict():
    cfg = ModelConfig(conv_channels=(4, 4, 8, 8), gru_units=6)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus_field": 1})


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(n_conv_layers=3)
    with pytest.raises(ConfigError):
        ModelConfig(conv_channels=(8, 8, 8))
    with pytest.raises(ConfigError):
        ModelConfig(pool_windows=((2, 2), (2, 2), (2, 2), (1, 4)))  # time factor 8
    with pytest.raises(ConfigError):
        ModelConfig(frequential_attention_units=64)
    with pytest.raises(ConfigError):
        ModelConfig(dropout_p=1.0)
    with pytest.raises(ConfigError):
        ModelConfig(ta_activation="gelu")


def test_parameter_shapes_and_residual_projections():
    plain = parameter_shapes(ModelConfig(conv_channels=(8, 8, 16, 16)))
    assert "res1_proj_w" not in plain and "res3_proj_w" not in plain
    assert plain["conv2_w"] == (16, 8, 3, 3)
    assert plain["gru_fwd_wx"] == (3 * 32, 16 * 4)
    assert plain["fa_w"] == (128, 128)

    mixed = parameter_shapes(ModelConfig(conv_channels=(4, 6, 8, 8)))
    assert mixed["res1_proj_w"] == (6, 4, 1, 1)  # 4 -> 6 needs a projection
    assert "res3_proj_w" not in mixed


def test_init_params_is_deterministic(toy_model_config):
    a = init_params(toy_model_config, seed=5)
    b = init_params(toy_model_config, seed=5)
    c = init_params(toy_model_config, seed=6)
    for name in a.tensors:
        assert np.array_equal(a[name].data, b[name].data)
    assert any(not np.array_equal(a[name].data, c[name].data) for name in a.tensors)
    assert np.all(a["bn0_gamma"].data == 1.0)
    assert np.all(a["conv0_b"].data == 0.0)


def test_active_excludes_disabled_attention(toy_model_config):
    full = init_params(toy_model_config, seed=0)
    assert len(full.active()) == len(full.trainable())
    off_cfg = ModelConfig(**{**toy_model_config.to_dict(),
                             "use_temporal_attention": False,
                             "use_frequential_attention": False})
    off = init_params(off_cfg, seed=0)
    names = {n for n, t in off.tensors.items() if t in off.active()}
    assert not any(n.startswith(ATTENTION_PREFIXES) for n in names)
    assert len(off.active()) == len(off.trainable()) - 4


# -- forward-pass structure ---------------------------------------------------------

def test_stack_channels_ordering():
    x = np.arange(12, dtype=np.float32).reshape(1, 2, 2, 3)
    out = stack_channels(Tensor(x))
    assert out.shape == (1, 2, 6)
    np.testing.assert_array_equal(out.data[0, 0], [0, 1, 2, 6, 7, 8])
    np.testing.assert_array_equal(out.data[0, 1], [3, 4, 5, 9, 10, 11])


def test_forward_shapes_single_and_batch(toy_model_config):
    params = init_params(toy_model_config, seed=1)
    t_frames = 40
    feat = RNG.normal(size=(t_frames, 128)).astype(np.float32)
    trace = model_forward(feat, params, mode="train", rng=np.random.default_rng(0))
    t_seg = toy_model_config.segments_for(t_frames)
    assert trace.probabilities.shape == (t_seg,)
    assert trace.logits.shape == (t_seg,)
    assert trace.temporal_weights.shape == (t_seg,)
    assert trace.frequential_weights.shape == (t_frames, 128)
    assert trace.weighted_feature.shape == (t_frames, 128)
    assert trace.cnn_output.shape == (3, t_seg, toy_model_config.freq_out)
    assert np.all(trace.probabilities.data > 0) and np.all(trace.probabilities.data < 1)

    batch = np.stack([feat, feat[::-1]])
    btrace = model_forward_batch(Tensor(batch), params, mode="train",
                                 rng=np.random.default_rng(0))
    assert btrace.probabilities.shape == (2, t_seg)


def test_forward_accepts_feature_matrix_and_rejects_bad_rank(toy_model_config):
    params = init_params(toy_model_config, seed=1)
    _prime_bn(params)
    fm = FeatureMatrix(RNG.normal(size=(16, 128)))
    trace = model_forward(fm, params, mode="eval")
    assert trace.probabilities.shape == (toy_model_config.segments_for(16),)
    with pytest.raises(DimensionError):
        model_forward(np.zeros((2, 16, 128), dtype=np.float32), params)
    with pytest.raises(DimensionError):
        model_forward_batch(Tensor(np.zeros((16, 128), np.float32)), params, "eval")


def _prime_bn(params: ModelParams, t_frames: int = 16):
    feat = np.random.default_rng(99).normal(size=(2, t_frames, 128)).astype(np.float32)
    with ad.no_grad():
        model_forward_batch(Tensor(feat), params, mode="train",
                            rng=np.random.default_rng(0))


def test_single_clip_matches_batch_row(toy_model_config):
    params = init_params(toy_model_config, seed=3)
    _prime_bn(params)
    feat = RNG.normal(size=(24, 128)).astype(np.float32)
    with ad.no_grad():
        single = model_forward(feat, params, mode="eval")
        row = model_forward_batch(Tensor(feat[None]), params, mode="eval")
    np.testing.assert_array_equal(single.probabilities.data,
                                  row.probabilities.data[0])


def test_eval_forward_is_deterministic(toy_model_config):
    params = init_params(toy_model_config, seed=4)
    _prime_bn(params)
    feat = RNG.normal(size=(20, 128)).astype(np.float32)
    with ad.no_grad():
        a = model_forward(feat, params, mode="eval").probabilities.data
        b = model_forward(feat, params, mode="eval").probabilities.data
    assert np.array_equal(a, b)


def test_zero_head_predicts_one_half(toy_model_config):
    params = init_params(toy_model_config, seed=5)
    for name in params.tensors:
        if name.startswith(("gru_", "fc_")):
            params[name].data[...] = 0.0
    feat = RNG.normal(size=(16, 128)).astype(np.float32)
    trace = model_forward(feat, params, mode="train", rng=np.random.default_rng(0))
    np.testing.assert_array_equal(trace.probabilities.data, 0.5)


# -- attention invariants ---------------------------------------------------------------

def test_attention_normalization_invariants(toy_model_config):
    for draw in range(20):
        params = init_params(toy_model_config, seed=100 + draw)
        t_frames = int(RNG.integers(8, 48))
        feat = RNG.normal(size=(t_frames, 128)).astype(np.float32) * 2.0
        trace = model_forward(feat, params, mode="train", rng=np.random.default_rng(draw))
        t_seg = toy_model_config.segments_for(t_frames)
        assert abs(float(trace.temporal_weights.data.sum()) - t_seg) < 1e-4 * t_seg
        row_sums = trace.frequential_weights.data.sum(axis=1)
        np.testing.assert_allclose(row_sums, 128.0, atol=1e-3)
        assert np.all(trace.temporal_weights.data >= 0)
        assert np.all(trace.frequential_weights.data >= 0)


def test_identity_reduction_with_zeroed_attention(toy_model_config):
    """Zeroed attention weights make both branches exact pass-throughs:
    sigmoid(0) band weights normalize to 1, ReLU(0) segment weights hit the
    uniform fallback, so the full model equals the attention-free CRNN."""
    base_cfg = ModelConfig(**{**toy_model_config.to_dict(),
                              "use_temporal_attention": False,
                              "use_frequential_attention": False})
    full = init_params(toy_model_config, seed=8)
    for name in full.tensors:
        if name.startswith(ATTENTION_PREFIXES):
            full[name].data[...] = 0.0
    base = ModelParams(base_cfg, {n: Tensor(t.data.copy(), requires_grad=True)
                                  for n, t in full.tensors.items()},
                       {k: s.astype(np.float32) for k, s in full.bn_states.items()})
    feat = RNG.normal(size=(2, 32, 128)).astype(np.float32)
    with ad.no_grad():
        y_full = model_forward_batch(Tensor(feat), full, mode="train").probabilities.data
        y_base = model_forward_batch(Tensor(feat), base, mode="train").probabilities.data
    np.testing.assert_allclose(y_full, y_base, atol=1e-6)
    assert np.max(np.abs(y_full - y_base)) == 0.0  # the reduction is in fact exact


def test_disabled_attention_weights_are_constant_one(toy_model_config):
    cfg = ModelConfig(**{**toy_model_config.to_dict(),
                         "use_temporal_attention": False,
                         "use_frequential_attention": False})
    params = init_params(cfg, seed=9)
    feat = RNG.normal(size=(16, 128)).astype(np.float32)
    trace = model_forward(feat, params, mode="train", rng=np.random.default_rng(0))
    assert np.all(trace.temporal_weights.data == 1.0)
    assert np.all(trace.frequential_weights.data == 1.0)


# -- gradients ---------------------------------------------------------------------------

def test_full_model_gradients_match_finite_differences(toy_model_config):
    params = init_params(toy_model_config, seed=11)
    feat = np.random.default_rng(42).normal(size=(2, 8, 128))
    worst = sampled_fd_check(params, feat, n_samples=3, seed=7)
    assert worst < 1e-2


def test_gradients_reach_every_active_tensor(toy_model_config):
    params = init_params(toy_model_config, seed=12)
    feat = Tensor(RNG.normal(size=(2, 8, 128)).astype(np.float32))
    trace = model_forward_batch(feat, params, mode="train")
    ad.tsum(trace.probabilities).backward()
    for name, t in params.tensors.items():
        assert t.grad is not None, f"{name} has no gradient"


# -- checkpoints -------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path, toy_model_config):
    params = init_params(toy_model_config, seed=13)
    _prime_bn(params)  # make running stats nontrivial
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert loaded.config == toy_model_config
    for name in params.tensors:
        assert np.array_equal(params[name].data, loaded[name].data), name
    for key in params.bn_states:
        a, b = params.bn_states[key], loaded.bn_states[key]
        assert np.array_equal(a.running_mean, b.running_mean)
        assert np.array_equal(a.running_var, b.running_var)
        assert a.count == b.count


def test_checkpoint_bad_magic_and_truncation(tmp_path, toy_model_config):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"WXYZ" + b"\x00" * 32)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    good = tmp_path / "good.ckpt"
    save_checkpoint(good, init_params(toy_model_config, seed=1))
    (tmp_path / "cut.ckpt").write_bytes(good.read_bytes()[:-100])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.ckpt")


def test_checkpoint_rejects_blob_table_mismatch(tmp_path, toy_model_config):
    params = init_params(toy_model_config, seed=2)
    blob = params["fc_b"]
    params.tensors["fc_extra"] = blob  # unexpected name in the blob table
    path = tmp_path / "extra.ckpt"
    save_checkpoint(path, params)
    with pytest.raises(CheckpointError, match="fc_extra"):
        load_checkpoint(path)


def test_load_pretrained_copies_shared_and_reinits_attention(tmp_path, toy_model_config):
    base_cfg = ModelConfig(**{**toy_model_config.to_dict(),
                              "use_temporal_attention": False,
                              "use_frequential_attention": False})
    base = init_params(base_cfg, seed=3)
    _prime_bn(base)
    path = tmp_path / "baseline.ckpt"
    save_checkpoint(path, base)

    full = load_pretrained_crnn(path, toy_model_config, seed=4)
    for name, t in base.tensors.items():
        if name.startswith(ATTENTION_PREFIXES):
            continue
        assert np.array_equal(t.data, full[name].data), name
    fresh = init_params(toy_model_config, seed=4)
    for name in ("ta_w", "fa_w"):
        assert np.array_equal(full[name].data, fresh[name].data)
        assert not np.array_equal(full[name].data, base[name].data)
    assert full.bn_states["bn0"].count == base.bn_states["bn0"].count
    np.testing.assert_array_equal(full.bn_states["bn0"].running_mean,
                                  base.bn_states["bn0"].running_mean)

    # attention toggles differ between base and full: still compatible
    with_attn = model_forward(RNG.normal(size=(16, 128)).astype(np.float32),
                              full, mode="eval")
    assert with_attn.probabilities.shape == (4,)


def test_load_pretrained_rejects_architecture_mismatch(tmp_path, toy_model_config):
    base_cfg = ModelConfig(**{**toy_model_config.to_dict(),
                              "use_temporal_attention": False,
                              "use_frequential_attention": False})
    path = tmp_path / "baseline.ckpt"
    save_checkpoint(path, init_params(base_cfg, seed=5))
    bigger = ModelConfig(**{**toy_model_config.to_dict(), "gru_units": 8})
    with pytest.raises(CheckpointError, match="gru_units"):
        load_pretrained_crnn(path, bigger, seed=0)

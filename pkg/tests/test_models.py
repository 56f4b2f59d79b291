import numpy as np
import pytest

from specswin import models as md
from specswin import tensor as tz
from specswin.errors import CheckpointError, ConfigError, ShapeError
from specswin.models import (MICRO_CONFIG, ModelConfig, OccupancyPredictor,
                             SpectrogramPredictor, micro_config,
                             predict_occupancy_from_frames, projection_steps)
from specswin.occupancy import SorLabelConfig, label_clip
from specswin.tensor import Tensor

from gradcheck import check_op


def rand_clip(cfg, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(cfg.input_t, cfg.input_h, cfg.input_w,
                             cfg.channels_in)).astype(np.float32)


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ConfigError):
        micro_config(enc_heads=(3, 2, 2))  # 3 does not divide 8
    with pytest.raises(ConfigError):
        micro_config(input_h=10)  # not a multiple of 4*patch_h
    with pytest.raises(ConfigError):
        micro_config(channels_in=2)
    with pytest.raises(ConfigError):
        micro_config(input_t=5)


def test_config_kv_roundtrip():
    cfg = micro_config()
    back = ModelConfig.from_kv(cfg.to_kv())
    assert back == cfg


def test_horizon_equals_input_length():
    assert micro_config(input_t=8).horizon == 8


# ---------------------------------------------------------------------------
# encoder


def test_encoder_stage_shapes_default_channels():
    cfg = ModelConfig(enc_pairs=(1, 1, 1), dec_pairs=(1, 1, 1), bottleneck_pairs=1)
    model = SpectrogramPredictor(cfg, seed=0)
    s1, s2, s3 = model.encode(rand_clip(cfg))
    assert s1.shape == (4, 16, 16, 96)
    assert s2.shape == (4, 8, 8, 192)
    assert s3.shape == (4, 4, 4, 384)


def test_encoder_zero_residual_keeps_embedding():
    cfg = micro_config()
    model = SpectrogramPredictor(cfg, seed=1)
    for pair in model.encoder.stage1.pairs:
        for blk in (pair.plain, pair.shifted):
            blk.wl = tz.zeros(blk.wl.shape)
            blk.w2 = tz.zeros(blk.w2.shape)
            blk.b2 = tz.zeros(blk.b2.shape)
    clip = rand_clip(cfg, seed=2)
    from specswin import swin3d as sw

    tokens = sw.patch_partition(Tensor(clip), cfg.patch)
    embedded = sw.linear_embed(tokens, model.encoder.embed_w, model.encoder.embed_b)
    s1, _, _ = model.encode(clip)
    np.testing.assert_allclose(s1.data, embedded.data, atol=1e-6)


def test_encoder_rejects_wrong_clip_shape():
    model = SpectrogramPredictor(micro_config(), seed=0)
    with pytest.raises(ShapeError):
        model.encode(np.zeros((4, 8, 8, 1), np.float32))


def test_gradient_reaches_embedding():
    cfg = micro_config()
    model = SpectrogramPredictor(cfg, seed=3)
    _, _, s3 = model.encode(rand_clip(cfg, seed=4))
    tz.sum_(s3).backward()
    assert np.abs(model.encoder.embed_w.grad).max() > 0


# ---------------------------------------------------------------------------
# decoder / forecaster


def test_decode_restores_input_shape_micro():
    cfg = micro_config()
    model = SpectrogramPredictor(cfg, seed=5)
    out = model.forward(rand_clip(cfg, seed=6))
    assert out.shape == (cfg.input_t, cfg.input_h, cfg.input_w, cfg.channels_in)
    assert (out.data >= 0).all() and (out.data <= 1).all()


def test_decode_ignores_skips_when_reductions_zero_them():
    cfg = micro_config()
    model = SpectrogramPredictor(cfg, seed=7)
    c = cfg.channels
    # bottom half of each reduction multiplies the skip features
    for reduce_w, c_dec in ((model.reduce1, 4 * c), (model.reduce2, 2 * c),
                            (model.reduce3, c)):
        reduce_w.data[c_dec:, :] = 0.0
    s1, s2, s3 = model.encode(rand_clip(cfg, seed=8))
    base = model.decode(s1, s2, s3).data
    rng = np.random.default_rng(9)
    s1p = Tensor(s1.data + rng.normal(size=s1.shape).astype(np.float32))
    s2p = Tensor(s2.data + rng.normal(size=s2.shape).astype(np.float32))
    perturbed = model.decode(s1p, s2p, s3).data
    np.testing.assert_array_equal(perturbed, base)
    # sanity: with live reductions the skips do matter
    model2 = SpectrogramPredictor(cfg, seed=7)
    q1, q2, q3 = model2.encode(rand_clip(cfg, seed=8))
    live = model2.decode(q1, q2, q3).data
    moved = model2.decode(Tensor(q1.data + 0.5), q2, q3).data
    assert np.abs(live - moved).max() > 0


def test_projection_schedule_default():
    assert projection_steps(96, 3) == [96, 48, 24, 12, 6, 3]
    assert projection_steps(8, 3) == [8, 4, 3]
    assert projection_steps(16, 1) == [16, 8, 4, 1]


def test_projection_shape_chain_default_width():
    cfg = ModelConfig(enc_pairs=(1, 1, 1), dec_pairs=(1, 1, 1), bottleneck_pairs=1)
    model = SpectrogramPredictor(cfg, seed=0)
    assert len(model.point_kernels) == 5  # n = ceil(log2(96/3))
    grid = Tensor(np.random.default_rng(1).normal(
        size=(4, 16, 16, 96)).astype(np.float32))
    out = model.project(grid)
    assert out.shape == (8, 64, 64, 3)


# ---------------------------------------------------------------------------
# occupancy predictor


def test_occupancy_output_length_and_range():
    cfg = micro_config(input_t=8)
    model = OccupancyPredictor(cfg, seed=1)
    out = model.forward(rand_clip(cfg, seed=2))
    assert out.shape == (8,)
    assert ((out.data > 0) & (out.data < 1)).all()


def test_occupancy_gradcheck_micro():
    cfg = micro_config()
    model = OccupancyPredictor(cfg, seed=3)
    # move weights off the degenerate tiny-activation init point
    for name, param in model.named_parameters():
        if param.ndim >= 2:
            param.data = param.data * 10.0
    clip = rand_clip(cfg, seed=4)

    def swap(install):
        def rebuild(t):
            old = install(t[0])
            out = model.forward(clip)
            install(old)
            return out

        return rebuild

    def set_out_w(t):
        old, model.out_w = model.out_w, t
        return old

    def set_lin_b0(t):
        old, model.lin_bs[0] = model.lin_bs[0], t
        return old

    def set_conv_k0(t):
        old, model.head_kernels[0] = model.head_kernels[0], t
        return old

    for install, value in ((set_out_w, model.out_w), (set_lin_b0, model.lin_bs[0]),
                           (set_conv_k0, model.head_kernels[0])):
        check_op(swap(install), [value.data.copy()], step=1e-2, weighted=True)


def test_occupancy_from_predicted_equals_direct_labeling():
    rng = np.random.default_rng(5)
    frames = rng.uniform(size=(4, 16, 16, 3)).astype(np.float32)
    cfg = SorLabelConfig(block_size=8)
    via_model = predict_occupancy_from_frames(Tensor(frames), cfg)
    direct = label_clip(frames, cfg)
    np.testing.assert_array_equal(via_model, direct)


def test_occupancy_from_predicted_endpoints():
    zeros = np.zeros((3, 16, 16, 1), np.float32)
    np.testing.assert_array_equal(
        predict_occupancy_from_frames(zeros, SorLabelConfig(block_size=8)), 0.0)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = micro_config()
    model = SpectrogramPredictor(cfg, seed=11)
    clip = rand_clip(cfg, seed=12)
    before = model.forward(clip).data
    path = str(tmp_path / "ckpt")
    md.save_checkpoint(model, path)
    loaded = md.load_checkpoint(path)
    for (n1, t1), (n2, t2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(t1.data, t2.data)
    np.testing.assert_array_equal(loaded.forward(clip).data, before)
    # save(load(x)) reproduces the checkpoint bytes
    path2 = str(tmp_path / "ckpt2")
    md.save_checkpoint(loaded, path2)
    import os

    for name in sorted(os.listdir(path)):
        with open(os.path.join(path, name), "rb") as f1, \
                open(os.path.join(path2, name), "rb") as f2:
            assert f1.read() == f2.read(), name


def test_checkpoint_missing_raises(tmp_path):
    with pytest.raises(CheckpointError):
        md.load_checkpoint(str(tmp_path / "absent"))


def test_checkpoint_sor_kind(tmp_path):
    model = OccupancyPredictor(micro_config(), seed=2)
    path = str(tmp_path / "sor_ckpt")
    md.save_checkpoint(model, path)
    loaded = md.load_checkpoint(path)
    assert isinstance(loaded, OccupancyPredictor)


def test_param_count_stable_across_builds():
    a = SpectrogramPredictor(micro_config(), seed=0).num_params()
    b = SpectrogramPredictor(micro_config(), seed=99).num_params()
    assert a == b == 70743

import numpy as np
import pytest

from specswin import ingest as ig
from specswin import training as tr
from specswin import tensor as tz
from specswin.errors import ConfigError, NumericError, ShapeError
from specswin.models import (OccupancyPredictor, SpectrogramPredictor,
                             micro_config, save_checkpoint)
from specswin.tensor import Tensor

from gradcheck import check_op


@pytest.fixture(scope="module")
def small_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    return ig.synth_dataset(out, 3, "fm_like", 6, 4, 8, 8,
                            channels=3, patch_hw=(2, 2))


# ---------------------------------------------------------------------------
# loss


def test_mse_zero_for_identical():
    x = Tensor(np.ones((3, 4)))
    assert tr.mse_loss(x, Tensor(np.ones((3, 4)))).item() == 0.0


def test_mse_uniform_difference():
    a = Tensor(np.full((5, 5), 3.0))
    b = Tensor(np.full((5, 5), 1.0))
    assert tr.mse_loss(a, b).item() == pytest.approx(4.0)


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        tr.mse_loss(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_mse_gradient_matches_closed_form_and_fd():
    rng = np.random.default_rng(0)
    pred = rng.normal(size=(4, 3)).astype(np.float32)
    target = rng.normal(size=(4, 3)).astype(np.float32)
    t = Tensor(pred.copy(), requires_grad=True)
    tr.mse_loss(t, Tensor(target)).backward()
    np.testing.assert_allclose(t.grad, 2.0 * (pred - target) / pred.size, atol=1e-6)
    check_op(lambda ts: tr.mse_loss(ts[0], Tensor(target)), [pred])


# ---------------------------------------------------------------------------
# optimizer


def make_param(value):
    return Tensor(np.array(value, dtype=np.float32), requires_grad=True)


def test_adamw_zero_grad_no_decay_is_noop():
    p = make_param([1.0, -2.0])
    opt = tr.AdamW([("p", p)], tr.TrainConfig(weight_decay=0.0))
    p.grad[...] = 0.0
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_first_step_is_signed_unit_step():
    for g in (0.37, -2.2):
        p = make_param([1.0])
        cfg = tr.TrainConfig(learning_rate=0.001, weight_decay=0.0)
        opt = tr.AdamW([("p", p)], cfg)
        p.grad[...] = g
        opt.step()
        expected = 1.0 - 0.001 * g / (abs(g) + cfg.eps)
        np.testing.assert_allclose(p.data, [expected], rtol=1e-6)


def test_adamw_pure_decay_shrinks_by_factor():
    p = make_param([2.0])
    cfg = tr.TrainConfig(learning_rate=0.1, weight_decay=0.5)
    opt = tr.AdamW([("p", p)], cfg)
    p.grad[...] = 0.0
    opt.step()
    np.testing.assert_allclose(p.data, [2.0 * (1 - 0.1 * 0.5)], rtol=1e-6)


def test_adamw_lr_zero_is_identity():
    p = make_param([1.5, -0.5])
    cfg = tr.TrainConfig(learning_rate=1e-30, weight_decay=0.01)
    opt = tr.AdamW([("p", p)], cfg)
    p.grad[...] = 3.0
    before = p.data.copy()
    opt.step()
    np.testing.assert_allclose(p.data, before, atol=1e-12)


def test_adamw_nonfinite_gradient_aborts():
    p = make_param([1.0])
    opt = tr.AdamW([("p", p)], tr.TrainConfig())
    p.grad[...] = np.nan
    with pytest.raises(NumericError, match="p"):
        opt.step()


# ---------------------------------------------------------------------------
# stopping rule


def test_stopping_rule_spec_sequence():
    stopper = tr.EarlyStopping(threshold_pct=0.01, patience=4)
    decisions = [stopper.update(x)
                 for x in (1.0, 0.9999, 0.99985, 0.99982, 0.99980)]
    assert decisions == [False, False, False, False, True]  # stop after epoch 5


def test_stopping_rule_never_fires_while_improving():
    stopper = tr.EarlyStopping(threshold_pct=0.01, patience=2)
    for x in (1.0, 0.9, 0.8, 0.7, 0.6):
        assert not stopper.update(x)


def test_stopping_rule_resets_on_improvement():
    stopper = tr.EarlyStopping(threshold_pct=1.0, patience=2)
    assert not stopper.update(1.0)
    assert not stopper.update(0.9999)  # tiny improvement: streak 1
    assert not stopper.update(0.5)     # big improvement: reset
    assert not stopper.update(0.49999)
    assert stopper.update(0.49998)     # two tiny in a row


# ---------------------------------------------------------------------------
# training loops


def test_train_stb_loss_decreases_and_is_deterministic(small_manifest):
    cfg = micro_config()
    logs = []
    for _ in range(2):
        model = SpectrogramPredictor(cfg, seed=4)
        log = tr.train_stb(model, small_manifest, tr.TrainConfig(seed=4, epochs=3))
        logs.append(log)
    assert logs[0].losses() == logs[1].losses()
    assert logs[0].losses()[-1] < logs[0].losses()[0]
    assert all(np.isfinite(l) for l in logs[0].losses())


def test_train_sor_outputs_stay_in_unit_interval(small_manifest):
    model = OccupancyPredictor(micro_config(), seed=5)
    tr.train_sor(model, small_manifest, tr.TrainConfig(seed=5, epochs=2))
    inp, _ = tr.load_samples(small_manifest, "train")[0]
    out = model.forward(inp).data
    assert ((out > 0) & (out < 1)).all()


def test_batch_size_two_runs(small_manifest):
    model = SpectrogramPredictor(micro_config(), seed=6)
    log = tr.train_stb(model, small_manifest,
                       tr.TrainConfig(seed=6, epochs=2, batch_size=2))
    assert len(log.epochs) == 2


def test_trainlog_csv_schema(tmp_path, small_manifest):
    model = SpectrogramPredictor(micro_config(), seed=7)
    log = tr.train_stb(model, small_manifest, tr.TrainConfig(seed=7, epochs=2))
    path = tmp_path / "log.csv"
    log.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,loss,val_loss,seconds"
    assert len(lines) == 3


def test_empty_split_is_config_error(small_manifest):
    bad = ig.DatasetManifest(**{**small_manifest.__dict__})
    bad.split_train = (0, 0)
    model = SpectrogramPredictor(micro_config(), seed=0)
    with pytest.raises(ConfigError):
        tr.train_stb(model, bad, tr.TrainConfig(epochs=1))


def test_transfer_finetune_own_data_stops_no_later_than_scratch(tmp_path, small_manifest):
    cfg = micro_config()
    # a 1% plateau threshold so the stopping rule actually fires at this scale
    budget = tr.TrainConfig(seed=8, epochs=40, patience=3, stop_threshold_pct=1.0)
    scratch = SpectrogramPredictor(cfg, seed=8)
    scratch_log = tr.train_stb(scratch, small_manifest, budget)
    ckpt = str(tmp_path / "src")
    save_checkpoint(scratch, ckpt)
    # fine-tuning a fitted model on its own source data: the stopping rule
    # fires within no more epochs than scratch training needed
    tuned, ft_log = tr.transfer_finetune(ckpt, small_manifest, budget)
    assert "consecutive" in ft_log.stop_reason
    assert len(ft_log.epochs) <= len(scratch_log.epochs)


def test_transfer_rejects_mismatched_dims(tmp_path, small_manifest):
    from specswin.errors import CheckpointError

    model = SpectrogramPredictor(micro_config(input_h=16, input_w=16), seed=9)
    ckpt = str(tmp_path / "mismatch")
    save_checkpoint(model, ckpt)
    with pytest.raises(CheckpointError):
        tr.transfer_finetune(ckpt, small_manifest, tr.TrainConfig(epochs=1))


def test_transfer_freeze_encoder_keeps_encoder_fixed(tmp_path, small_manifest):
    model = SpectrogramPredictor(micro_config(), seed=10)
    ckpt = str(tmp_path / "frozen")
    save_checkpoint(model, ckpt)
    before = {n: p.data.copy() for n, p in model.named_parameters()
              if n.startswith("enc.")}
    tuned, _ = tr.transfer_finetune(ckpt, small_manifest,
                                    tr.TrainConfig(seed=10, epochs=1),
                                    freeze_encoder=True)
    for name, p in tuned.named_parameters():
        if name.startswith("enc."):
            np.testing.assert_array_equal(p.data, before[name])


# ---------------------------------------------------------------------------
# mmd


def test_mmd_identical_sets_zero():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(16, 4))
    assert abs(tr.mmd(x, x.copy())) <= 1e-9


def test_mmd_separated_means_dominate():
    rng = np.random.default_rng(1)
    x = rng.normal(0.0, 1.0, size=(64, 4))
    y = rng.normal(10.0, 1.0, size=(64, 4))
    z = rng.normal(0.0, 1.0, size=(64, 4))
    far = tr.mmd(x, y)
    near = tr.mmd(x, z)
    assert far >= 10.0 * max(near, 1e-12)


def test_mmd_symmetric_and_nonnegative():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(10, 3))
    y = rng.normal(1.0, 1.0, size=(14, 3))
    assert tr.mmd(x, y) == tr.mmd(y, x)
    assert tr.mmd(x, y) >= 0.0

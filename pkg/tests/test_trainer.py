import math
import struct

import numpy as np
import pytest

from conftest import separable_windows, tiny_config
from hybrid_ids import autograd as ag
from hybrid_ids.metrics import confusion, macro_f1
from hybrid_ids.model import HybridModel, predict
from hybrid_ids.trainer import (CHECKPOINT_MAGIC, AdamState, CheckpointError, ConfigMismatchError,
                                TrainConfig, adam_step, fit, load_checkpoint, read_checkpoint,
                                save_checkpoint, validation_split)


def two_class(**kw):
    return tiny_config(classes=2, **kw)


# ------------------------------------------------------------------- config

@pytest.mark.parametrize("kw", [dict(val_fraction=0.0), dict(val_fraction=0.5),
                                dict(patience=0), dict(batch_size=0)])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_defaults():
    c = TrainConfig()
    assert (c.batch_size, c.lr, c.max_epochs, c.patience, c.val_fraction) == (256, 0.001, 200, 15, 0.1)
    assert (c.beta1, c.beta2, c.eps, c.l2) == (0.9, 0.999, 1e-8, 1e-5)
    assert c.clip_norm == 0.0


# --------------------------------------------------------------------- Adam

def test_adam_zero_gradient():
    p = {"w": ag.Tensor(np.array([1.0, -2.0]))}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
    np.testing.assert_array_equal(p["w"].values, [1.0, -2.0])


def test_adam_first_step():
    g = np.array([0.5, -3.0, 1e-9])
    p = {"w": ag.Tensor(np.zeros(3))}
    adam_step(p, {"w": g}, AdamState(), 0.01)
    np.testing.assert_allclose(p["w"].values, -0.01 * np.sign(g) * np.abs(g) / (np.abs(g) + 1e-8),
                               rtol=1e-12)


def test_adam_three_steps_on_square():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    # hand-iterated recurrence for f = theta^2
    theta, m, v = 1.0, 0.0, 0.0
    for t in range(1, 4):
        g = 2.0 * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p = {"w": ag.Tensor(np.array([1.0]))}
    state = AdamState()
    for _ in range(3):
        adam_step(p, {"w": 2.0 * p["w"].values}, state, lr)
    assert p["w"].values[0] == pytest.approx(theta, abs=1e-12)
    assert state.t == 3 and np.all(state.v["w"] >= 0)


def test_adam_lr_zero_is_bit_identical(rng):
    w = rng.normal(size=(3, 4))
    p = {"w": ag.Tensor(w.copy())}
    adam_step(p, {"w": rng.normal(size=(3, 4))}, AdamState(), 0.0)
    assert np.array_equal(p["w"].values, w)


def test_adam_shape_mismatch():
    with pytest.raises(ag.ShapeError):
        adam_step({"w": ag.Tensor(np.zeros(2))}, {"w": np.zeros(3)}, AdamState(), 0.1)


# ---------------------------------------------------------------- val split

def test_validation_split_stratified():
    labels = np.array([0] * 50 + [1] * 20 + [2] * 1 + [3] * 3)
    tr, va = validation_split(labels, 0.1, 0)
    assert np.intersect1d(tr, va).size == 0 and tr.size + va.size == labels.size
    assert np.bincount(labels[va], minlength=4).tolist() == [5, 2, 0, 1]


# ---------------------------------------------------------------------- fit

def test_separable_fit_reaches_perfect_f1():
    data = separable_windows(60, seed=1)
    cfg = TrainConfig(batch_size=8, lr=0.01, max_epochs=60, patience=5, seed=0, l2=0.0)
    best, rep = fit(data, cfg, HybridModel(two_class()))
    assert max(rep.val_f1) == 1.0
    assert rep.stop_reason == "early" and rep.epochs < cfg.max_epochs
    assert rep.val_f1[rep.best_epoch - 1] == max(rep.val_f1)
    assert rep.losses[4] < rep.losses[0]  # seeded regression over the first 5 epochs
    held = separable_windows(20, seed=7)
    acc = np.mean(predict(best, held).argmax(axis=1) == [w.label for w in held])
    assert acc >= 0.9


def test_stall_stops_after_two_epochs():
    data = separable_windows(20, seed=2)
    cfg = TrainConfig(batch_size=8, lr=0.0, patience=1, max_epochs=50)
    _, rep = fit(data, cfg, HybridModel(two_class()))
    assert rep.epochs == 2 and rep.stop_reason == "early" and rep.best_epoch == 1


def test_max_epochs_stop():
    data = separable_windows(20, seed=2)
    _, rep = fit(data, TrainConfig(batch_size=8, max_epochs=2, patience=10), HybridModel(two_class()))
    assert rep.epochs == 2 and rep.stop_reason == "max_epochs"


def test_fit_is_deterministic():
    data = separable_windows(24, seed=3)
    cfg = TrainConfig(batch_size=8, lr=0.01, max_epochs=4, patience=10, seed=5)
    a_model, a = fit(data, cfg, HybridModel(two_class()))
    b_model, b = fit(data, cfg, HybridModel(two_class()))
    assert a.losses == b.losses and a.val_f1 == b.val_f1 and a.best_epoch == b.best_epoch
    for k, v in a_model.state_dict().items():
        assert np.array_equal(v, b_model.state_dict()[k])


def test_best_checkpoint_returned():
    data = separable_windows(30, seed=4)
    cfg = TrainConfig(batch_size=8, lr=0.05, max_epochs=8, patience=8, seed=0)
    best, rep = fit(data, cfg, HybridModel(two_class()))
    _, va = validation_split([w.label for w in data], cfg.val_fraction, cfg.seed)
    val = [data[i] for i in va]
    pred = predict(best, val).argmax(axis=1)
    assert macro_f1(confusion([w.label for w in val], pred, 2)) == max(rep.val_f1)


def test_fit_errors():
    with pytest.raises(ValueError, match="empty"):
        fit([], TrainConfig(), HybridModel(two_class()))
    one = [w for w in separable_windows(10) if w.label == 0]
    with pytest.raises(ValueError, match="single class"):
        fit(one, TrainConfig(), HybridModel(two_class()))


def test_log_lines():
    _, rep = fit(separable_windows(20), TrainConfig(batch_size=8, max_epochs=2), HybridModel(two_class()))
    lines = rep.log_lines().splitlines()
    assert lines[0] == "epoch,loss,val_f1"
    assert len(lines) == 4 and lines[1].startswith("1,")
    assert float(lines[2].split(",")[1]) == rep.losses[1]
    assert lines[-1] == "# best_epoch=%d stop_reason=max_epochs" % rep.best_epoch


# -------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path, rng):
    m = HybridModel(tiny_config(seed=4))
    for st in m.bn.values():
        st.mean = rng.normal(size=st.mean.shape)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path, {"classes": ["a", "b", "c"]}, {"scaler.lo": np.arange(3.0)})
    back, meta, extra = load_checkpoint(path, tiny_config(seed=4))
    assert meta == {"classes": ["a", "b", "c"]}
    np.testing.assert_array_equal(extra["scaler.lo"], [0.0, 1.0, 2.0])
    for k, v in m.state_dict().items():
        assert np.array_equal(v, back.state_dict()[k])
    assert path.read_bytes()[:8] == CHECKPOINT_MAGIC


def test_checkpoint_errors(tmp_path):
    m = HybridModel(tiny_config())
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    raw = path.read_bytes()

    bad = tmp_path / "bad"
    bad.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)
    bad.write_bytes(raw[:8] + struct.pack("<I", 99) + raw[12:])
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(bad)
    bad.write_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad)
    bad.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(bad)
    with pytest.raises(ConfigMismatchError) as exc:
        load_checkpoint(path, tiny_config(lstm_hidden=4, head_dim=8))
    assert "lstm_hidden" in str(exc.value) and "(4, 3)" in str(exc.value)

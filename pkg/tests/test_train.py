import numpy as np
import pytest

from bfalab import init
from bfalab.data import Dataset, synthetic_gaussians
from bfalab.models import build_mlp, checkpoint_bytes
from bfalab.quant import dequantize, quantize_layer
from bfalab.train import (ConfigError, TrainingConfig, TrainingDiverged, epoch_order, schedule, sgd_step,
                          sgd_update, train)


def test_xavier_uniform_bound():
    w = init.init_weights((784, 512), "xavier-uniform", seed=0)
    bound = np.sqrt(6 / 1296)
    assert bound == pytest.approx(0.06804, abs=1e-5)
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.99 * bound


def test_xavier_normal_variance():
    w = init.init_weights((400, 250), "xavier-normal", seed=1)
    assert w.size == 100_000
    assert abs(w.var() / (2 / 650) - 1) < 0.10


def test_fixed_schemes():
    u = init.init_weights((300, 300), "uniform", seed=2)
    assert np.abs(u).max() <= init.UNIFORM_BOUND
    n = init.init_weights((300, 300), "normal", seed=2)
    assert abs(n.std() / init.NORMAL_STD - 1) < 0.02
    with pytest.raises(ValueError):
        init.init_weights((2, 2), "he", seed=0)


def test_conv_fans():
    assert init.fans((32, 1, 3, 3)) == (9, 288)


def test_init_deterministic_and_layer_keyed():
    a = init.init_weights((5, 7), "normal", seed=3, layer=0)
    np.testing.assert_array_equal(a, init.init_weights((5, 7), "normal", seed=3, layer=0))
    assert not np.array_equal(a, init.init_weights((5, 7), "normal", seed=3, layer=1))


def test_schedules():
    assert schedule(0.1, "exponential", 0) == 0.1
    assert schedule(0.1, "exponential", 40) == pytest.approx(0.1 * 0.95 ** 40)
    assert schedule(0.1, "exponential", 40) == pytest.approx(0.012851, abs=5e-7)
    assert schedule(0.1, "step", 79) == 0.1
    assert schedule(0.1, "step", 80) == pytest.approx(0.01)
    assert schedule(0.1, "step", 130, milestones=(80, 120)) == pytest.approx(0.001)
    assert schedule(0.1, "none", 500) == 0.1


def test_quadratic_surrogate():
    # L = w^2, dL/dw = 2w
    w = np.array([1.0])
    sgd_update(w, 2 * w, 0.1)
    assert w[0] == pytest.approx(0.8)


def test_weight_decay_term():
    w = np.array([2.0, -1.0])
    g = np.array([0.5, 0.25])
    expected = w - 0.1 * g - 0.1 * 3e-4 * w
    sgd_update(w, g, 0.1, 3e-4)
    np.testing.assert_allclose(w, expected, rtol=1e-15)


def _toy(seed=0):
    return synthetic_gaussians(400, 6, 2, seed=seed)


def test_zero_lr_no_change():
    m = build_mlp((6, 4, 2), seed=0)
    before = checkpoint_bytes(m)
    ds = _toy()
    sgd_step(m, ds.train_x[:16], ds.train_y[:16], 0.0, 0.0)
    assert checkpoint_bytes(m) == before


def test_step_reduces_loss_and_uses_quantized_weights():
    m = build_mlp((6, 8, 2), init="xavier-normal", seed=0)
    ds = _toy()
    x, y = ds.train_x[:64], ds.train_y[:64]
    before = m.loss(x, y)
    reported = sgd_step(m, x, y, 0.05)
    assert reported == pytest.approx(before, rel=1e-12)  # forward used dequant(quant(shadow))
    assert m.loss(x, y) < before
    for i in range(m.num_layers):
        p = m.layer(i)
        assert p.q == quantize_layer(p.weight)
        np.testing.assert_array_equal(p.effective, dequantize(p.q))


def test_config_validation():
    for kw in ({"lr": 0}, {"scheduler": "cosine"}, {"epochs": 0}, {"dropout": 1.0}, {"init": "he"}):
        with pytest.raises(ConfigError) as exc:
            TrainingConfig(**kw)
        assert exc.value.field == next(iter(kw))


def test_linear_model_separable():
    ds = synthetic_gaussians(600, 4, 2, seed=1, separation=10)
    m, rec = train("mlp-4-2", ds, TrainingConfig(lr=0.1, epochs=20, batch_size=32, seed=1))
    assert len(rec.test_acc) == 20 and len(rec.lr) == 20
    assert rec.train_acc[-1] >= 0.99
    assert m.accuracy(ds.train_x, ds.train_y) >= 0.99


def test_training_deterministic():
    ds = _toy(2)
    cfg = TrainingConfig(lr=0.1, epochs=3, batch_size=32, dropout=0.2, init="xavier-uniform", seed=7)
    a, ra = train("mlp-6-8-2", ds, cfg)
    b, rb = train("mlp-6-8-2", ds, cfg)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert ra.train_loss == rb.train_loss
    c, _ = train("mlp-6-8-2", ds, TrainingConfig(**{**cfg.as_dict(), "seed": 8}))
    assert checkpoint_bytes(c) != checkpoint_bytes(a)


def test_final_view_is_quantized_shadow_and_provenance():
    ds = _toy(3)
    cfg = TrainingConfig(lr=0.1, epochs=2, batch_size=50)
    m, rec = train("mlp-6-3-2", ds, cfg)
    for i in range(m.num_layers):
        assert m.layer(i).q == quantize_layer(m.layer(i).weight)
    assert m.provenance["training"] == cfg.as_dict()
    assert m.provenance["final_test_acc"] == rec.test_acc[-1]
    assert m.provenance["init_params"]["normal_std"] == init.NORMAL_STD


def test_epoch_order_pure():
    np.testing.assert_array_equal(epoch_order(50, 1, 3), epoch_order(50, 1, 3))
    assert not np.array_equal(epoch_order(50, 1, 3), epoch_order(50, 1, 4))
    assert sorted(epoch_order(50, 1, 3)) == list(range(50))


def test_divergence_reports_epoch():
    ds = _toy(4)
    x = ds.train_x.copy()
    x[5] = np.nan
    bad = Dataset(x, ds.train_y, ds.test_x, ds.test_y, 2, "bad", {})
    with pytest.raises(TrainingDiverged) as exc:
        train("mlp-6-2", bad, TrainingConfig(epochs=2))
    assert exc.value.epoch == 0


def test_record_csv(tmp_path):
    ds = _toy(5)
    _, rec = train("mlp-6-2", ds, TrainingConfig(lr=0.1, epochs=2))
    rec.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,test_acc,lr"
    assert len(lines) == 3

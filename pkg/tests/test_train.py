import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svhscore.errors import InvalidConfig, NonFiniteLoss, TooFewPatients
from svhscore.gradcheck import TINY, tiny_problem
from svhscore.model import NetworkConfig, init_params, load_checkpoint
from svhscore.synth import SynthConfig, make_dataset
from svhscore.train import OptimizerState, TrainConfig, apply_adamw, fit, lr_at, split_folds, train_step

SMALL_NET = NetworkConfig(depth=2, base_channels=4, in_h=32, in_w=32)
SMALL_SYNTH = SynthConfig(seed=3, n_patients=8, canvas=(32, 32), bar_width=3, bar_height=2, gap_base=1, gap_per_grade=0.5, jitter_px=1)


def test_split_folds_examples():
    ids = [f"P{i:02d}" for i in range(16)]
    train, val = split_folds(ids[::-1], 8, 0)
    assert val == ["P00", "P08"]
    assert sorted(train + val) == ids and not set(train) & set(val)
    _, val = split_folds([f"P{i}" for i in range(8)], 8, 3)
    assert val == ["P3"]
    with pytest.raises(TooFewPatients):
        split_folds(["a", "b", "c", "d"], 8, 0)


@given(st.sets(st.text("abcdef", min_size=1, max_size=4), min_size=8, max_size=40), st.integers(2, 8))
def test_split_folds_partition(ids, n_folds):
    ids = list(ids)
    for fold in range(n_folds):
        train, val = split_folds(ids, n_folds, fold)
        assert sorted(train + val) == sorted(ids)
        assert not set(train) & set(val)


def test_lr_at_examples():
    cfg = TrainConfig(max_lr=1.0)
    assert lr_at(0.0, cfg) == pytest.approx(1 / 25, abs=1e-15)
    assert lr_at(0.3, cfg) == 1.0
    start = 1 / 25
    end = start / 1e4
    frac = (0.65 - 0.3) / 0.7
    assert lr_at(0.65, cfg) == pytest.approx(end + (1 - end) * (1 + math.cos(math.pi * frac)) / 2, rel=1e-12)
    assert lr_at(1.0, cfg) == pytest.approx(end, rel=1e-12)


def test_lr_at_continuous_with_single_peak():
    cfg = TrainConfig(max_lr=2.0)
    ts = np.linspace(0, 1, 10001)
    lrs = np.array([lr_at(t, cfg) for t in ts])
    assert np.abs(np.diff(lrs)).max() < 2e-3
    assert lrs.argmax() == 3000 and (lrs == lrs.max()).sum() == 1
    assert np.all(np.diff(lrs[:3001]) >= 0) and np.all(np.diff(lrs[3000:]) <= 0)


def test_train_config_validation():
    with pytest.raises(InvalidConfig):
        TrainConfig(pct_up=1.0)
    with pytest.raises(InvalidConfig):
        TrainConfig(max_lr=0.0)


def _params():
    return {"conv.w": np.full((2, 2), 2.0), "conv.b": np.full(2, 3.0), "n.gamma": np.ones(2)}


def test_adamw_zero_grad_zero_decay_is_identity():
    p = _params()
    opt = OptimizerState.zeros_like(p)
    apply_adamw(p, {k: np.zeros_like(v) for k, v in p.items()}, opt, 0.1, TrainConfig(weight_decay=0.0))
    assert all(np.array_equal(p[k], v) for k, v in _params().items())
    assert opt.step == 1


def test_adamw_zero_grad_decays_weights_only():
    p = _params()
    opt = OptimizerState.zeros_like(p)
    apply_adamw(p, {k: np.zeros_like(v) for k, v in p.items()}, opt, 0.1, TrainConfig(weight_decay=0.5))
    np.testing.assert_allclose(p["conv.w"], 2.0 * (1 - 0.1 * 0.5), rtol=1e-15)
    assert np.all(p["conv.b"] == 3.0) and np.all(p["n.gamma"] == 1.0)


def test_adamw_first_step_is_sign_step():
    # bias correction makes the first update lr * g / (|g| + eps)
    p = {"a.w": np.array([1.0, 1.0])}
    opt = OptimizerState.zeros_like(p)
    apply_adamw(p, {"a.w": np.array([0.3, -4.0])}, opt, 0.01, TrainConfig(weight_decay=0.0))
    np.testing.assert_allclose(p["a.w"], [0.99, 1.01], rtol=1e-6)


def test_train_step_decreases_loss_on_fixed_batch():
    params, image, targets = tiny_problem(0)
    opt = OptimizerState.zeros_like(params)
    cfg = TrainConfig()
    batch = (image.pixels[None], [targets])
    losses = [train_step(params, opt, batch, 3e-3, cfg, TINY)[2] for _ in range(21)]
    assert losses[-1] < losses[0]


def test_train_step_nonfinite_loss():
    params, image, targets = tiny_problem(0)
    params["head.seg.b"][:] = np.nan
    with pytest.raises(NonFiniteLoss):
        train_step(params, OptimizerState.zeros_like(params), (image.pixels[None], [targets]), 1e-3, TrainConfig(), TINY)


def test_train_step_deterministic():
    runs = []
    for _ in range(2):
        params, image, targets = tiny_problem(5)
        opt = OptimizerState.zeros_like(params)
        for _ in range(5):
            train_step(params, opt, (image.pixels[None], [targets]), 1e-2, TrainConfig(), TINY)
        runs.append(params)
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


@pytest.fixture(scope="module")
def small_data():
    return make_dataset(SMALL_SYNTH)


def test_fit_zero_epochs_returns_init(small_data, tmp_path):
    cfg = TrainConfig(epochs=0, seed=4)
    res = fit(small_data, cfg, SMALL_NET, tmp_path)
    assert res.metrics == []
    loaded, net, meta = load_checkpoint(res.checkpoint)
    rng = np.random.default_rng(4)
    init = init_params(SMALL_NET, int(rng.integers(2**63 - 1)))
    assert all(np.array_equal(loaded[k], init[k]) for k in init)
    assert meta["val_ids"] == ["P00"]


def test_fit_deterministic_and_writes_metrics(small_data, tmp_path):
    cfg = TrainConfig(epochs=2, seed=1)
    a = fit(small_data, cfg, SMALL_NET, tmp_path / "a")
    b = fit(small_data, cfg, SMALL_NET, tmp_path / "b", threads=2)
    assert a.metrics == b.metrics
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    text_a = (tmp_path / "a" / "model_metrics.csv").read_text()
    assert text_a == (tmp_path / "b" / "model_metrics.csv").read_text()
    rows = list(csv.DictReader(text_a.splitlines()))
    assert list(rows[0]) == ["epoch", "train_loss", "val_rmse_narrowing", "val_rmse_erosion", "lr"]
    assert len(rows) == 2 and all(math.isfinite(float(r["val_rmse_narrowing"])) for r in rows)


def test_fit_validation_leak_free(small_data):
    """Blanking the validation patient's pixels leaves training bit-identical."""
    cfg = TrainConfig(epochs=1, seed=2)
    base = fit(small_data, cfg, SMALL_NET)
    blanked = []
    for rec in small_data:
        if rec.patient_id in base.val_ids:
            rec = type(rec)(rec.patient_id, {k: im.with_(pixels=np.zeros_like(im.pixels)) for k, im in rec.images.items()})
        blanked.append(rec)
    other = fit(blanked, cfg, SMALL_NET)
    assert all(np.array_equal(base.params[k], other.params[k]) for k in base.params)


@pytest.mark.slow
def test_fit_single_batch_overfits():
    data = make_dataset(SynthConfig(seed=5, n_patients=1, canvas=(32, 32), bar_width=3, bar_height=2, gap_base=1, gap_per_grade=0.5, jitter_px=1))
    cfg = TrainConfig(epochs=50, augment=False, use_validation=False, max_lr=1e-2)
    res = fit(data, cfg, SMALL_NET)
    assert res.metrics[-1]["train_loss"] < res.metrics[0]["train_loss"]

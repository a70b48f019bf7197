import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from factorformer import net, train
from factorformer.errors import ConfigError

from gradcheck import TINY

HP = net.Hyperparams(**TINY)


def _data(n=80, seed=0, prior=True):
    rng = np.random.default_rng(seed)
    f = np.zeros(n)
    for t in range(1, n):
        f[t] = 0.8 * f[t - 1] + rng.standard_normal()
    y = np.column_stack([f + 0.5 * rng.standard_normal(n), -f + 0.5 * rng.standard_normal(n)])
    y = (y - y.mean(0)) / y.std(0)
    return train.TrainData(y, [(0, 50)], [(50, 70)], f if prior else None)


CFG = train.TrainConfig(batch=8, max_epochs=4, patience=10, runs=2, lam=0.6, T0=20, warmup=2)


# ---------------------------------------------------------------- config


def test_config_defaults_match_reference_values():
    c = train.TrainConfig()
    assert (c.batch, c.lr, c.T0, c.max_epochs, c.weight_decay, c.dropout, c.lam, c.runs,
            c.patience) == (32, 1e-4, 100, 1000, 0.015, 0.15, 0.6, 10, 100)


@pytest.mark.parametrize("kw", [dict(lam=1.5), dict(lam=-0.1), dict(batch=0), dict(lr=0),
                                dict(warmup=100), dict(loss="mse"), dict(patience=-1)])
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        train.TrainConfig(**kw)


# ---------------------------------------------------------------- windows


def test_window_count():
    w = train.make_windows(np.zeros((800, 5)), 9)
    assert len(w) == 791


def test_first_window_alignment():
    y = np.arange(40, dtype=float).reshape(20, 2)
    w = train.make_windows(y, 4)
    assert w.t[0] == 3
    np.testing.assert_array_equal(w.X[0], y[0:4])
    np.testing.assert_array_equal(w.target[0], y[4])


def test_prior_windows_follow_series():
    y = np.zeros((12, 2))
    prior = np.arange(12.0)
    w = train.make_windows(y, 3, prior)
    np.testing.assert_array_equal(w.prior[2], [2.0, 3.0, 4.0])


def test_misaligned_prior_rejected():
    with pytest.raises(ConfigError):
        train.make_windows(np.zeros((12, 2)), 3, np.zeros(11))


def test_too_short_rejected():
    with pytest.raises(ConfigError):
        train.make_windows(np.zeros((3, 2)), 3)


def test_segments_never_cross_boundaries():
    y = np.zeros((100, 2))
    segs = [(0, 40), (60, 100)]
    w = train.windows_for_segments(y, 5, segs)
    first = w.t - 4
    target = w.t + 1
    inside = [(a <= f and tg < b) for f, tg in zip(first, target) for a, b in segs
              if a <= f < b]
    assert len(inside) == len(w) and all(inside)
    assert len(w) == (40 - 5) + (40 - 5)


# ---------------------------------------------------------------- loss / schedule


def test_loss_mixture_value():
    tr = net.forward(np.zeros((3, 2)), net.init_params(HP, 0), HP)
    x, y = tr.x_hat, tr.y_hat_next
    # PI = 0.2, PE = 0.4 -> 0.6 * 0.2 + 0.4 * 0.4
    assert train.loss(tr, y + 0.4, x + 0.2, 0.6) == pytest.approx(0.28)


def test_loss_lambda_one_is_prior_distance():
    tr = net.forward(np.zeros((3, 2)), net.init_params(HP, 0), HP)
    a = train.loss(tr, tr.y_hat_next + 9.0, tr.x_hat + 0.3, 1.0)
    b = train.loss(tr, tr.y_hat_next - 2.0, tr.x_hat + 0.3, 1.0)
    assert a == b == pytest.approx(0.3)


def test_loss_zero_at_minimum():
    tr = net.forward(np.zeros((3, 2)), net.init_params(HP, 0), HP)
    assert train.loss(tr, tr.y_hat_next, tr.x_hat, 0.6) == 0.0


def test_lr_warmup_and_cosine():
    c = train.TrainConfig()
    assert train.lr_at(0, c) == 0.0
    assert train.lr_at(5, c) == pytest.approx(0.5e-4)
    assert train.lr_at(10, c) == pytest.approx(1e-4)
    mid = 10 + 45
    expect = 1e-4 * 0.5 * (1 + math.cos(math.pi * 45 / 90))
    assert train.lr_at(mid, c) == pytest.approx(expect)
    assert train.lr_at(99.999, c) < 1e-11


def test_lr_cycles_restart():
    c = train.TrainConfig()
    for e in (3.5, 10, 42.25, 77):
        assert train.lr_at(e + 100, c) == pytest.approx(train.lr_at(e, c), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1000))
def test_lr_bounded(e):
    assert 0 <= train.lr_at(e, train.TrainConfig()) <= 1e-4


# ---------------------------------------------------------------- optimizer


def test_adamw_first_step_is_sign_times_lr():
    p = net.TransformerParams({"W1": np.array([1.0, -2.0]), "b1": np.array([0.5])})
    g = {"W1": np.array([0.3, -0.01]), "b1": np.array([2.0])}
    opt = train.AdamW(p, train.TrainConfig(weight_decay=0.0))
    opt.step(p, g, 1e-3)
    np.testing.assert_allclose(p["W1"], [1 - 1e-3, -2 + 1e-3], rtol=1e-7)
    np.testing.assert_allclose(p["b1"], [0.5 - 1e-3], rtol=1e-6)


def test_weight_decay_decoupled():
    # zero gradients: only the decay moves decayed tensors, exempt ones stay
    p = net.TransformerParams({"init.W1": np.array([2.0]), "init.b1": np.array([2.0])})
    g = {k: np.zeros_like(v) for k, v in p.items()}
    opt = train.AdamW(p, train.TrainConfig(weight_decay=0.1))
    opt.step(p, g, 0.01)
    assert p["init.W1"][0] == pytest.approx(2.0 * (1 - 0.01 * 0.1))
    assert p["init.b1"][0] == 2.0


# ---------------------------------------------------------------- training


def test_train_run_history():
    params, hist = train.train_run(_data(), HP, CFG, 5)
    assert len(hist.train_loss) == len(hist.val_loss) == 4
    assert hist.val_loss[hist.best_epoch] == min(hist.val_loss)
    assert hist.stop_reason == "max_epochs"
    assert params.keys() == net.init_params(HP, 0).keys()


def test_best_params_are_kept():
    params, hist = train.train_run(_data(), HP, CFG, 6)
    hp = replace(HP, dropout=CFG.dropout)
    d = _data()
    va = train.windows_for_segments(d.y, HP.P, d.val_segments, d.prior)
    assert train.validation_loss(params, hp, va) == hist.best_val


def test_patience_zero_one_epoch():
    _, hist = train.train_run(_data(), HP, replace(CFG, patience=0), 1)
    assert len(hist.val_loss) == 1 and hist.stop_reason == "patience"


def test_early_stop_after_patience():
    _, hist = train.train_run(_data(), HP, replace(CFG, max_epochs=200, patience=2, lr=5e-2), 1)
    assert len(hist.val_loss) - 1 - hist.best_epoch == 2
    assert hist.stop_reason == "patience"


def test_training_bit_reproducible():
    a, ha = train.train_run(_data(), HP, CFG, 11)
    b, hb = train.train_run(_data(), HP, CFG, 11)
    assert ha.train_loss == hb.train_loss and ha.val_loss == hb.val_loss
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_training_reduces_loss():
    cfg = replace(CFG, max_epochs=30, lr=3e-3, T0=40, dropout=0.0)
    _, hist = train.train_run(_data(200, 2), HP, cfg, 3)
    assert hist.train_loss[-1] < 0.8 * hist.train_loss[0]


def test_prior_required():
    with pytest.raises(ConfigError):
        train.train_run(_data(prior=False), HP, CFG, 0)


def test_lambda_zero_without_prior():
    _, hist = train.train_run(_data(prior=False), HP, replace(CFG, lam=0.0, max_epochs=1), 0)
    assert len(hist.val_loss) == 1


def test_monitor_trace_recorded():
    _, hist = train.train_run(_data(), HP, CFG, 0, monitor=lambda p: 1.5)
    assert hist.test_fit == [1.5] * 4


def test_history_csv_roundtrip(tmp_path):
    h = train.TrainHistory([1.0, 0.5, 0.7], [0.9, 0.4, 0.6], [1.0, 2.0, 3.0], 1, "patience")
    h.to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,test_fit"
    back = train.TrainHistory.from_csv(tmp_path / "h.csv", "patience")
    assert back.val_loss == h.val_loss and back.best_epoch == 1 and back.test_fit == h.test_fit


def test_factor_series_nan_before_first_window():
    p = net.init_params(HP, 0)
    x = train.factor_series(p, HP, _data().y)
    assert np.isnan(x[: HP.P - 1]).all() and np.isfinite(x[HP.P - 1:]).all()
    tr = net.forward(_data().y[10:13], p, HP)
    assert x[12] == tr.x_hat[0, -1]


# ---------------------------------------------------------------- ensembles


@pytest.fixture(scope="module")
def ensemble():
    return train.train_ensemble(_data(), HP, replace(CFG, max_epochs=2), r=3)


def test_ensemble_mean_is_average(ensemble):
    np.testing.assert_array_equal(ensemble.mean, ensemble.series.mean(axis=0))
    assert ensemble.series.shape == (3, 80)


def test_ensemble_mean_permutation_invariant(ensemble):
    perm = ensemble.series[[2, 0, 1]]
    np.testing.assert_allclose(perm.mean(axis=0), ensemble.mean, rtol=1e-14, atol=1e-15)


def test_ensemble_mean_sd_bounded(ensemble):
    sl = slice(HP.P - 1, None)
    assert ensemble.mean[sl].std() <= ensemble.series[:, sl].std(axis=1).max() + 1e-12


def test_ensemble_aligned_with_prior(ensemble):
    d = _data()
    for s in ensemble.series:
        ok = np.isfinite(s[:70])
        assert np.corrcoef(s[:70][ok], d.prior[:70][ok])[0, 1] >= 0


def test_single_run_ensemble_equals_run():
    cfg = replace(CFG, max_epochs=2)
    ens = train.train_ensemble(_data(), HP, cfg, r=1, align=False)
    params, _ = train.train_run(_data(), HP, cfg, train.run_seed_for(cfg.seed, 0))
    x = train.factor_series(params, replace(HP, dropout=cfg.dropout), _data().y)
    np.testing.assert_array_equal(ens.mean, x)


def test_run_seeds_distinct_and_stable():
    s = [train.run_seed_for(0, i) for i in range(10)]
    assert len(set(s)) == 10
    assert s == [train.run_seed_for(0, i) for i in range(10)]


def test_jobs_do_not_change_results():
    cfg = replace(CFG, max_epochs=2)
    a = train.train_ensemble(_data(), HP, cfg, r=2, jobs=1)
    b = train.train_ensemble(_data(), HP, cfg, r=2, jobs=2)
    np.testing.assert_array_equal(a.series, b.series)


def test_factor_csv(tmp_path):
    train.write_factor_csv(tmp_path / "f.csv", [0, 1], {"x_hat": np.array([0.5, -1.0])})
    assert (tmp_path / "f.csv").read_text().splitlines() == ["t,x_hat", "0,0.5", "1,-1.0"]

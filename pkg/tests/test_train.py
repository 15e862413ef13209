import csv
import importlib

import numpy as np
import pytest

from oracles import central_difference, relative_error, shrinkage_margin
from spixel_ssc.data import SynthSpec, make_synthetic, standardize
from spixel_ssc.errors import ConfigError, NumericalError
from spixel_ssc.losses import noise_loss_grad
from spixel_ssc.train import (PARAM_NAMES, ParameterSet, Phase, TrainConfig, adam_step, backward, forward,
                              load_checkpoint, phases, save_checkpoint, softplus, softplus_inv, train)

SMALL = dict(T=3, K=5, M=4)
# the package re-exports the train function under the module's name
train_mod = importlib.import_module("spixel_ssc.train")


@pytest.fixture(scope="module")
def blocks():
    cube, labels = make_synthetic(SynthSpec(16, 16, 6, 4, noise_sigma=0.05, seed=7))
    return standardize(cube).values, 16, 16


def perturbed(rng, N=64, D=3, M=4):
    X = rng.standard_normal((N, D))
    p = ParameterSet.initial(N, D, M)
    p.delta = 0.1 * rng.standard_normal((N, D))
    p.raw_compactness = 0.5 * rng.standard_normal(M)
    return X, p


# ---------------------------------------------------------------- config


def test_defaults():
    c = TrainConfig()
    assert (c.alpha, c.epochs, c.learning_rate, c.tau, c.T, c.K, c.rho) == (50.0, 200, 1e-3, 0.1, 10, 15, 1.0)
    p = ParameterSet.initial(4, 2, 3)
    assert p.lambda_sr == pytest.approx(0.1)
    np.testing.assert_array_equal(p.compactness, 0.5)


@pytest.mark.parametrize("kwargs", [dict(ablation_mode="M5"), dict(tau=0.0), dict(K=0), dict(epochs=-1),
                                    dict(M=0), dict(learning_rate=-1e-3)])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_from_dict_rejects_unknown_keys():
    assert TrainConfig.from_dict({"alpha": 3.0}).alpha == 3.0
    with pytest.raises(ConfigError, match="lr"):
        TrainConfig.from_dict({"lr": 0.1})


def test_softplus_inverse():
    for y in (1e-3, 0.1, 5.0):
        assert float(softplus(softplus_inv(y))) == pytest.approx(y, rel=1e-12)


def test_phase_schedules():
    assert phases(TrainConfig(ablation_mode="M1")) == []
    p4 = phases(TrainConfig(epochs=7, ablation_mode="M4"))
    assert [p.epochs for p in p4] == [3, 4]
    assert p4[0].active == {"delta", "raw_compactness"} and p4[0].rep_weight == 0.0
    assert p4[1].active == {"raw_lambda_sr"} and p4[1].spixel_weight == 0.0 == p4[1].noise_weight
    (p3,) = phases(TrainConfig(ablation_mode="M3"))
    assert p3.active == {"raw_lambda_sr"}
    (full,) = phases(TrainConfig(alpha=2.0))
    assert full.active == set(PARAM_NAMES) and full.rep_weight == 2.0


# --------------------------------------------------------------- forward


def test_uniform_image_alpha_zero_is_pure_spixel_loss():
    X = np.ones((64, 3))
    cfg = TrainConfig(alpha=0.0, **SMALL)
    report, _ = forward(ParameterSet.initial(64, 3, 4), X, 8, 8, cfg)
    assert report.spixel_compact == pytest.approx(0.0, abs=1e-12)
    assert report.noise == 0.0
    assert report.total == report.spixel_compact + report.spixel_consistency


def test_forward_is_deterministic(rng):
    X, p = perturbed(rng)
    cfg = TrainConfig(**SMALL)
    assert forward(p, X, 8, 8, cfg)[0].total == forward(p.copy(), X, 8, 8, cfg)[0].total


def test_non_finite_input_names_stage():
    X = np.zeros((64, 3))
    X[5, 1] = np.nan
    with pytest.raises(NumericalError, match="features"):
        forward(ParameterSet.initial(64, 3, 4), X, 8, 8, TrainConfig(**SMALL))


# -------------------------------------------------------------- backward


# seed 2 puts an ADMM shrinkage input within 4e-6 of its kink
@pytest.mark.parametrize("seed", [0, 1, 3])
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    X, p = perturbed(rng)
    cfg = TrainConfig(**SMALL)
    _, trace = forward(p, X, 8, 8, cfg)
    assert shrinkage_margin(trace.selfrep, p.lambda_sr) > 1e-4
    g = backward(trace)
    for name in PARAM_NAMES:
        fd = central_difference(lambda: forward(p, X, 8, 8, cfg)[0].total, p[name], 1e-4)
        assert relative_error(g[name], fd) <= 1e-3, name


def test_lambda_gradient_zero_without_rep_loss(rng):
    X, p = perturbed(rng)
    _, trace = forward(p, X, 8, 8, TrainConfig(alpha=0.0, **SMALL))
    assert np.all(backward(trace)["raw_lambda_sr"] == 0.0)


def test_noise_only_gradient(rng):
    X, p = perturbed(rng)
    _, trace = forward(p, X, 8, 8, TrainConfig(**SMALL))
    g = backward(trace, Phase(0, 0.0, 0.0, 1.0, frozenset({"delta"})))
    np.testing.assert_allclose(g["delta"], 2 * 50.0 * p.delta / p.delta.size, rtol=1e-14)
    np.testing.assert_array_equal(g["delta"], noise_loss_grad(p.delta))


def test_m3_gradient_only_for_lambda(rng):
    X, p = perturbed(rng)
    cfg = TrainConfig(ablation_mode="M3", **SMALL)
    _, trace = forward(p, X, 8, 8, cfg)
    g = backward(trace, phases(cfg)[0])
    assert np.all(g["delta"] == 0) and np.all(g["raw_compactness"] == 0)
    assert g["raw_lambda_sr"][0] != 0


# ------------------------------------------------------------------- adam


def test_adam_zero_gradient_is_identity(rng):
    p = ParameterSet.initial(5, 2, 3)
    p.delta = rng.standard_normal((5, 2))
    before = p.copy()
    adam_step(p, {n: np.zeros_like(p[n]) for n in PARAM_NAMES}, 1e-3)
    for n in PARAM_NAMES:
        np.testing.assert_array_equal(p[n], before[n])


def test_adam_first_step_by_hand():
    p = ParameterSet.initial(1, 1, 2)
    g = np.array([0.5, -4.0])
    adam_step(p, {"delta": np.zeros((1, 1)), "raw_compactness": g, "raw_lambda_sr": np.zeros(1)}, 0.01)
    # m_hat = g, v_hat = g^2 after bias correction
    expected = -0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.raw_compactness, expected, rtol=1e-12)


def test_adam_constant_gradient_step_tends_to_lr():
    p = ParameterSet.initial(1, 1, 1)
    lr = 1e-2
    grads = {"delta": np.zeros((1, 1)), "raw_compactness": np.array([3.0]), "raw_lambda_sr": np.zeros(1)}
    for _ in range(500):
        prev = p.raw_compactness.copy()
        adam_step(p, grads, lr)
    assert abs(prev[0] - p.raw_compactness[0]) == pytest.approx(lr, rel=1e-6)


def test_adam_leaves_inactive_parameters():
    p = ParameterSet.initial(2, 2, 2)
    ones = {n: np.ones_like(p[n]) for n in PARAM_NAMES}
    adam_step(p, ones, 0.1, active=["raw_lambda_sr"])
    assert np.all(p.delta == 0) and np.all(p.m["delta"] == 0)
    assert p.raw_lambda_sr[0] != softplus_inv(0.1)


# ------------------------------------------------------------------- loop


def test_m1_runs_zero_epochs(blocks):
    X, h, w = blocks
    res = train(X, h, w, 16, TrainConfig(ablation_mode="M1", epochs=20))
    assert len(res.history) == 1 and res.params.step == 0
    assert np.all(res.params.delta == 0)


def test_loss_decreases_by_epoch_50(blocks):
    X, h, w = blocks
    res = train(X, h, w, 16, TrainConfig(epochs=50))
    assert res.history[49].total <= res.history[0].total


@pytest.mark.parametrize("mode, frozen", [("M2", {"raw_lambda_sr"}), ("M3", {"delta", "raw_compactness"})])
def test_excluded_parameters_never_move(blocks, mode, frozen):
    X, h, w = blocks
    res = train(X, h, w, 16, TrainConfig(epochs=6, ablation_mode=mode))
    init = ParameterSet.initial(X.shape[0], X.shape[1], 16)
    for name in PARAM_NAMES:
        moved = not np.array_equal(res.params[name], init[name])
        assert moved == (name not in frozen), name


def test_m4_trains_superpixels_then_representation(blocks):
    X, h, w = blocks
    m4 = train(X, h, w, 16, TrainConfig(epochs=4, ablation_mode="M4")).params
    m2 = train(X, h, w, 16, TrainConfig(epochs=2, ablation_mode="M2")).params
    # phase 1 equals two M2 epochs; phase 2 touches only lambda
    np.testing.assert_array_equal(m4.delta, m2.delta)
    np.testing.assert_array_equal(m4.raw_compactness, m2.raw_compactness)
    assert m4.raw_lambda_sr[0] != softplus_inv(0.1)


def test_loss_csv_rows(blocks, tmp_path):
    X, h, w = blocks
    train(X, h, w, 16, TrainConfig(epochs=3), loss_csv=tmp_path / "loss.csv")
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0][0] == "epoch" and rows[0][-1] == "total"
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3"]


def test_checkpoints_are_byte_identical(blocks, tmp_path):
    X, h, w = blocks
    cfg = TrainConfig(epochs=3, seed=4)
    train(X, h, w, 16, cfg, checkpoint=tmp_path / "a.bin")
    train(X, h, w, 16, cfg, checkpoint=tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_checkpoint_round_trip(rng, tmp_path):
    p = ParameterSet.initial(6, 2, 3)
    p.delta = rng.standard_normal((6, 2))
    p.m["delta"] = rng.standard_normal((6, 2))
    p.step = 9
    cfg = TrainConfig(alpha=7.0, M=3)
    save_checkpoint(tmp_path / "c.bin", p, cfg, 12)
    q, cfg2, epoch = load_checkpoint(tmp_path / "c.bin")
    assert (cfg2, epoch, q.step) == (cfg, 12, 9)
    for n in PARAM_NAMES:
        np.testing.assert_array_equal(q[n], p[n])
        np.testing.assert_array_equal(q.m[n], p.m[n])
    assert (tmp_path / "c.bin.json").exists()


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.bin")


def test_nan_abort_keeps_last_good_checkpoint(blocks, tmp_path, monkeypatch):
    X, h, w = blocks
    real_step = train_mod.adam_step

    def poisoned(params, grads, lr, **kw):
        real_step(params, grads, lr, **kw)
        if params.step == 3:
            params.delta[0, 0] = np.nan
        return params

    monkeypatch.setattr(train_mod, "adam_step", poisoned)
    with pytest.raises(NumericalError, match="parameters"):
        train(X, h, w, 16, TrainConfig(epochs=10), checkpoint=tmp_path / "ck.bin")
    p, _, epoch = load_checkpoint(tmp_path / "ck.bin")
    assert epoch == 2 and p.step == 2
    assert np.all(np.isfinite(p.delta))

import math

import numpy as np
import pytest

from ucwarm.core import Profiles
from ucwarm.predictor import (AdamW, NonFiniteLoss, NormStats, PredictorConfig, ProbabilityTensor,
                              bce_grad, bce_loss, clip_global_norm, fit_norm_stats, forward,
                              init_params, load_checkpoint, loss_and_gradients, normalize_profiles,
                              one_cycle_lr, predict, save_checkpoint, sigmoid, threshold_schedule,
                              train)

from oracles import finite_difference, rel_err

TOY = dict(T=4, n_gen=2, d_model=8, heads=2, ffn_dim=12, cls_hidden=10, dropout=0.0)


def toy_params(cfg, seed=0):
    rng = np.random.default_rng(seed)
    p = init_params(cfg, seed=seed)
    return {k: v + 0.1 * rng.normal(size=v.shape) for k, v in p.items()}


# ------------------------------------------------------------------ normalization

def test_normalize_centering_and_guard():
    stats = NormStats(mu=np.array([1.0, 2.0, 3.0]), sigma=np.array([2.0, 0.0, 1.0]))
    X = normalize_profiles(np.array([[1.0, 2.0, 3.0], [3.0, 2.5, 3.0]]), stats)
    assert np.all(X[0] == 0.0)
    assert X[1, 1] == pytest.approx(0.5 / 1e-6)
    assert np.isfinite(X).all()


def test_normalized_training_split_statistics(rng):
    profs = [Profiles(rng.uniform(50, 100, 6), rng.uniform(0, 20, 6), rng.uniform(0, 30, 6))
             for _ in range(20)]
    stats = fit_norm_stats(profs)
    X = np.stack([normalize_profiles(p, stats) for p in profs]).reshape(-1, 3)
    assert np.allclose(X.mean(axis=0), 0.0, atol=1e-9)
    assert np.allclose(X.std(axis=0), stats.sigma / (stats.sigma + 1e-6), rtol=1e-9)


# ---------------------------------------------------------------------- forward

def test_forward_deterministic_and_finite():
    cfg = PredictorConfig(**TOY)
    p = init_params(cfg)
    assert np.all(p["pos"] == 0.0)
    X = np.zeros((4, 3))
    a, b = forward(p, X, cfg), forward(p, X, cfg)
    assert a.shape == (2, 4) and np.isfinite(a).all() and np.array_equal(a, b)


def test_feature_permutation_identity(rng):
    cfg = PredictorConfig(**TOY)
    p = toy_params(cfg)
    X = rng.normal(size=(4, 3))
    perm = [2, 0, 1]
    q = dict(p, W_e=p["W_e"][perm])
    assert np.allclose(forward(p, X, cfg), forward(q, X[:, perm], cfg), atol=1e-12)


def test_attention_rows_sum_to_one(rng):
    cfg = PredictorConfig(**{**TOY, "layers": 3})
    _, cache = forward(toy_params(cfg), rng.normal(size=(5, 4, 3)), cfg, return_cache=True)
    for layer in cache["layers"]:
        assert np.allclose(layer["attn"].sum(axis=-1), 1.0, atol=1e-6)


def test_shape_mismatch_raises():
    cfg = PredictorConfig(**TOY)
    with pytest.raises(ValueError):
        forward(init_params(cfg), np.zeros((5, 3)), cfg)
    with pytest.raises(ValueError):
        PredictorConfig(d_model=10, heads=4)


def test_pre_ln_removes_constant_shift(rng):
    from ucwarm.predictor import _ln_forward
    H = rng.normal(size=(2, 4, 8))
    g, b = rng.normal(size=8), rng.normal(size=8)
    a, _ = _ln_forward(H, g, b)
    shifted, _ = _ln_forward(H + 3.7, g, b)
    assert np.allclose(a, shifted, atol=1e-6)


def test_dropout_only_in_train_mode(rng):
    cfg = PredictorConfig(**{**TOY, "dropout": 0.5})
    p = toy_params(cfg)
    X = rng.normal(size=(4, 3))
    assert np.array_equal(forward(p, X, cfg), forward(p, X, cfg, mode="eval"))
    t1 = forward(p, X, cfg, mode="train", rng=np.random.default_rng(1))
    t2 = forward(p, X, cfg, mode="train", rng=np.random.default_rng(1))
    assert np.array_equal(t1, t2) and not np.allclose(t1, forward(p, X, cfg))
    with pytest.raises(ValueError):
        forward(p, X, cfg, mode="train")


# ------------------------------------------------------------------------- loss

def test_bce_point_values():
    assert bce_loss([0.0], [1.0], 1.5) == pytest.approx(1.5 * math.log(2), abs=1e-12)
    assert bce_loss([0.0], [0.0], 1.5) == pytest.approx(math.log(2), abs=1e-12)
    assert bce_loss([40.0], [1.0], 1.5) == pytest.approx(0.0, abs=1e-15)
    assert bce_loss([-40.0], [1.0], 1.5) == pytest.approx(60.0, rel=1e-12)
    assert np.isfinite(bce_loss([-1e4, 1e4], [1.0, 0.0], 1.5))


def test_bce_alpha_scales_positive_gradient(rng):
    z = rng.normal(size=(2, 5))
    y = np.ones_like(z)
    assert np.allclose(bce_grad(z, y, 3.0), 2.0 * bce_grad(z, y, 1.5), rtol=1e-14)


def test_sigmoid_consistency(rng):
    z = rng.normal(scale=20, size=100)
    pt = ProbabilityTensor(z)
    assert np.allclose(pt.probs, 1 / (1 + np.exp(-z)), atol=1e-12)
    back = ProbabilityTensor.from_probs(pt.probs)
    assert np.allclose(sigmoid(back.logits), pt.probs, atol=1e-12)


# -------------------------------------------------------------------- gradients

@pytest.mark.parametrize("layers", [1, 2, 3])
def test_gradients_match_finite_differences(layers, rng):
    cfg = PredictorConfig(**{**TOY, "layers": layers})
    p = toy_params(cfg, seed=layers)
    X = rng.normal(size=(3, 4, 3))
    Y = (rng.random((3, 2, 4)) > 0.5).astype(float)
    _, g = loss_and_gradients(p, X, Y, cfg)
    fd = finite_difference(p, X, Y, cfg)
    worst = max(rel_err(g[k], fd[k]) for k in p)
    assert worst <= 1e-4


def test_masked_position_gets_no_positional_gradient(rng):
    cfg = PredictorConfig(**{**TOY, "layers": 1, "heads": 1})
    p = toy_params(cfg)
    X = rng.normal(size=(1, 4, 3))
    Y = (rng.random((1, 2, 4)) > 0.5).astype(float)
    # hour 2 is never attended to, and its own output is weighted out of the loss
    mask = np.array([True, True, False, True])
    w = np.ones((1, 2, 4))
    w[..., 2] = 0.0
    _, g = loss_and_gradients(p, X, Y, cfg, weights=w, key_mask=mask)
    assert np.allclose(g["pos"][2], 0.0, atol=1e-14)
    assert np.abs(g["pos"][0]).max() > 0


# --------------------------------------------------------------------- training

def test_one_cycle_endpoints():
    assert one_cycle_lr(0, 100, 1e-2) == pytest.approx(1e-2 / 25)
    assert one_cycle_lr(30, 100, 1e-2) == pytest.approx(1e-2)
    assert one_cycle_lr(100, 100, 1e-2) == pytest.approx(1e-2 / 1e4)
    lrs = [one_cycle_lr(k, 100, 1e-2) for k in range(30, 101)]
    assert all(b <= a + 1e-15 for a, b in zip(lrs, lrs[1:]))


def test_adamw_zero_gradient_only_decays():
    p = {"w": np.array([1.0, -2.0])}
    opt = AdamW(lr=0.1, weight_decay=0.01)
    opt.step(p, {"w": np.zeros(2)})
    assert np.allclose(p["w"], np.array([1.0, -2.0]) * (1 - 0.1 * 0.01), rtol=1e-15)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    n = clip_global_norm(g, 1.0)
    assert n == pytest.approx(5.0)
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)


def test_training_reduces_loss(rng):
    cfg = PredictorConfig(**{**TOY, "lr": 1e-2, "batch_size": 8, "dropout": 0.05})
    X = rng.normal(size=(8, 4, 3))
    Y = (rng.random((8, 2, 4)) > 0.5).astype(float)
    p0 = init_params(cfg)
    loss0, _ = loss_and_gradients(p0, X, Y, cfg)
    p, log = train(X, Y, cfg, steps=200)
    loss1, _ = loss_and_gradients(p, X, Y, cfg)
    assert loss1 < loss0
    assert len(log.lrs) == 200 and log.lrs[0] == pytest.approx(cfg.lr / 25)


def test_training_log_bit_identical(rng):
    cfg = PredictorConfig(**{**TOY, "epochs": 3, "batch_size": 4})
    X = rng.normal(size=(8, 4, 3))
    Y = (rng.random((8, 2, 4)) > 0.5).astype(float)
    _, a = train(X, Y, cfg, X, Y)
    _, b = train(X, Y, cfg, X, Y)
    assert a.step_loss == b.step_loss and a.val_accuracy == b.val_accuracy


def test_non_finite_loss_aborts():
    cfg = PredictorConfig(**{**TOY, "epochs": 1, "batch_size": 2})
    X = np.full((2, 4, 3), np.nan)
    with pytest.raises(NonFiniteLoss) as exc:
        train(X, np.ones((2, 2, 4)), cfg)
    assert exc.value.step == 0


# -------------------------------------------------------------------- inference

def test_threshold_rules(rng):
    z = np.array([[0.0, 1.0, -1.0]])
    assert threshold_schedule(ProbabilityTensor(z), 0.5).tolist() == [[0, 1, 0]]
    probs = rng.uniform(0.01, 0.99, (3, 5))
    assert threshold_schedule(probs, 0.0).all()
    assert not threshold_schedule(probs, 1.0).any()
    taus = np.linspace(0, 1, 11)
    for lo, hi in zip(taus, taus[1:]):
        assert np.all(threshold_schedule(probs, hi) <= threshold_schedule(probs, lo))


def test_predict_and_checkpoint_round_trip(tmp_path, rng):
    cfg = PredictorConfig(**TOY)
    p = toy_params(cfg)
    prof = Profiles(rng.uniform(50, 100, 4), rng.uniform(0, 20, 4), rng.uniform(0, 30, 4))
    stats = fit_norm_stats([prof])
    s, pt = predict(p, prof, stats, cfg)
    assert s.shape == (2, 4) and np.array_equal(s, (pt.probs > 0.5).astype(np.int8))
    save_checkpoint(tmp_path / "m.npz", p, cfg, stats)
    p2, cfg2, stats2 = load_checkpoint(tmp_path / "m.npz")
    assert cfg2 == cfg and all(np.array_equal(p[k], p2[k]) for k in p)
    assert np.array_equal(stats2.mu, stats.mu)
    iid, pt2 = ProbabilityTensor.from_json(pt.to_json("abc"))
    assert iid == "abc" and np.allclose(pt2.probs, pt.probs, atol=1e-12)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seil import nn


def test_init_deterministic_and_bounds():
    layers = nn.dense_layers("d", (20, 128, 3)) + nn.lstm_layers("l", 5, 4, 2)
    a, b = nn.init_params(layers, 7), nn.init_params(layers, 7)
    assert a.names() == b.names()
    assert all(np.array_equal(a[k], b[k]) for k in a.names())
    bound = math.sqrt(6 / 148)
    assert nn.xavier_bound(20, 128) == bound
    assert np.abs(a["d.0.W"]).max() <= bound
    assert a["d.0.W"].dtype == np.float32
    for k in a.names():
        if k.endswith(".b") and k.startswith("d."):
            assert not a[k].any()
    fb = a["l.0.b"]
    assert np.all(fb[4:8] == 1.0) and not fb[:4].any() and not fb[8:].any()


def test_init_rejects_bad_dims():
    with pytest.raises(ValueError):
        nn.init_params(nn.dense_layers("d", (0, 3)), 0)


def test_mlp_zero_and_identity():
    p = {"m.0.W": np.zeros((4, 3), np.float32), "m.0.b": np.zeros(3, np.float32)}
    out, _ = nn.mlp_forward(p, np.ones((2, 4), np.float32), "m")
    assert not out.any()
    p = {"m.0.W": np.eye(5, dtype=np.float32), "m.0.b": np.zeros(5, np.float32)}
    x = np.random.default_rng(0).standard_normal((3, 5)).astype(np.float32)
    assert np.array_equal(nn.mlp_forward(p, x, "m")[0], x)


def test_mlp_matches_hand_product():
    rng = np.random.default_rng(1)
    p = nn.init_params(nn.dense_layers("m", (3, 4, 2)), 3).params
    x = rng.standard_normal((5, 3)).astype(np.float32)
    h = np.maximum(x.astype(np.float64) @ p["m.0.W"] + p["m.0.b"], 0)
    want = h @ p["m.1.W"] + p["m.1.b"]
    got, _ = nn.mlp_forward(p, x, "m")
    assert np.allclose(got, want, atol=1e-6)


def test_mlp_dimension_mismatch():
    p = nn.init_params(nn.dense_layers("m", (3, 2)), 0).params
    with pytest.raises(ValueError):
        nn.mlp_forward(p, np.zeros((1, 4), np.float32), "m")


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def test_lstm_two_steps_vs_manual_gates():
    rng = np.random.default_rng(2)
    H, D = 2, 3
    W = rng.standard_normal((H + D, 4 * H))
    b = rng.standard_normal(4 * H)
    xs = rng.standard_normal((2, D))
    h, c = [0.0] * H, [0.0] * H
    for x in xs:
        v = list(h) + list(x)
        pre = [sum(v[r] * W[r, col] for r in range(H + D)) + b[col] for col in range(4 * H)]
        i = [_sig(pre[j]) for j in range(H)]
        f = [_sig(pre[H + j]) for j in range(H)]
        o = [_sig(pre[2 * H + j]) for j in range(H)]
        g = [math.tanh(pre[3 * H + j]) for j in range(H)]
        c = [f[j] * c[j] + i[j] * g[j] for j in range(H)]
        h = [o[j] * math.tanh(c[j]) for j in range(H)]
    out, _ = nn.lstm_forward({"l.0.W": W, "l.0.b": b}, xs[None], prefix="l")
    assert np.allclose(out[0], h, atol=1e-6)


def test_lstm_zero_weights_and_forget_bias_only():
    p = nn.init_params(nn.lstm_layers("l", 3, 4, 2), 0).params
    z = {k: np.zeros_like(v) for k, v in p.items()}
    out, _ = nn.lstm_forward(z, np.ones((2, 5, 3), np.float32), prefix="l")
    assert not out.any()
    z["l.0.b"][4:8] = 1.0
    out, _ = nn.lstm_forward(z, np.ones((1, 1, 3), np.float32), prefix="l")
    assert not out.any()


def test_lstm_padding_mask():
    p = nn.init_params(nn.lstm_layers("l", 3, 4, 2), 5).params
    x = np.random.default_rng(0).standard_normal((1, 4, 3)).astype(np.float32)
    padded = np.concatenate([x, np.full((1, 3, 3), 9.0, np.float32)], axis=1)
    a, _ = nn.lstm_forward(p, x, [4], "l")
    b, _ = nn.lstm_forward(p, padded, [4], "l")
    assert np.allclose(a, b, atol=1e-6)


def test_losses_closed_forms():
    y = np.array([[0.3, -0.2]], np.float32)
    loss, d = nn.mse_loss(y.copy(), y)
    assert loss == 0 and not d.any()
    loss, _ = nn.cross_entropy(np.zeros((1, 2), np.float32), np.array([0]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    loss, _ = nn.cross_entropy(np.zeros((3, 8), np.float32), np.array([0, 3, 7]))
    assert loss == pytest.approx(math.log(8), abs=1e-12)


@given(st.integers(0, 10**6))
@settings(max_examples=30)
def test_cross_entropy_nonnegative_and_softmax_sums(seed):
    logits = np.random.default_rng(seed).standard_normal((4, 8)) * 20
    loss, _ = nn.cross_entropy(logits, np.arange(4))
    assert loss >= 0
    assert np.allclose(nn.softmax(logits).sum(axis=1), 1.0, atol=1e-12)


def test_non_finite_loss_names_batch():
    net = nn.MLPSpec((2, 2), prefix="m")
    p = nn.init_params(net.layers(), 0).params
    x = np.array([[np.inf, 0.0]], np.float32)
    with pytest.raises(nn.TrainingDiverged, match="batch 17"), np.errstate(invalid="ignore"):
        nn.loss_and_grads(net, p, (x, np.zeros((1, 2), np.float32)), "mse", batch_id=17)


def test_adam_golden_three_steps():
    # f(w) = w^2 from w = 1, lr 0.1; hand recurrence in float64:
    # 0.9000000005, 0.8004122286917927, 0.70158627294603
    ps = nn.ParamSet({"w": np.array([1.0], np.float32)})
    ps.init_adam()
    seq = []
    for _ in range(3):
        nn.adam_step(ps, {"w": 2 * ps["w"]}, 0.1)
        seq.append(float(ps["w"][0]))
    assert seq == [0.8999999761581421, 0.8004121780395508, 0.7015862464904785]
    assert np.allclose(seq, [0.9000000005, 0.8004122286917927, 0.70158627294603], atol=1e-6)
    assert ps.adam_t == 3


def test_adam_first_step_magnitude():
    ps = nn.ParamSet({"w": np.array([2.0, -1.0], np.float32)})
    ps.init_adam()
    nn.adam_step(ps, {"w": np.array([0.3, -5.0], np.float32)}, 0.01)
    assert np.allclose(ps["w"], [2.0 - 0.01, -1.0 + 0.01], atol=1e-6)


def test_adam_zero_grads_leave_params_bit_unchanged():
    ps = nn.init_params(nn.dense_layers("d", (3, 2)), 1)
    ps.init_adam()
    before = {k: v.copy() for k, v in ps.params.items()}
    nn.adam_step(ps, {k: np.zeros_like(v) for k, v in ps.params.items()}, 0.01)
    assert all(np.array_equal(before[k], ps[k]) for k in before)
    assert ps.adam_t == 1


def test_ema_substitution_and_tau_zero():
    ps = nn.ParamSet({"w": np.array([1.0], np.float32)}, {"w": np.array([0.0], np.float32)})
    nn.ema_update(ps, 0.9)
    assert ps.ema["w"][0] == pytest.approx(0.1, abs=1e-7)
    nn.ema_update(ps, 0.0)
    assert np.array_equal(ps.ema["w"], ps["w"])
    with pytest.raises(ValueError):
        nn.ema_update(ps, 1.0)


@given(st.sampled_from([0.0, 0.5, 0.9, 0.999]), st.integers(1, 100), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_ema_closed_form(tau, t, seed):
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal(8).astype(np.float32)
    s0 = rng.standard_normal(8).astype(np.float32)
    ps = nn.ParamSet({"w": theta.copy()}, {"w": s0.copy()})
    for _ in range(t):
        nn.ema_update(ps, tau)
    want = theta.astype(np.float64) + tau**t * (s0.astype(np.float64) - theta)
    assert np.max(np.abs(ps.ema["w"] - want)) <= 1e-5
    assert np.array_equal(ps["w"], theta)


@pytest.mark.parametrize("kind", nn.GRAD_CHECK_KINDS)
def test_grad_check_all_kinds(kind):
    for seed in range(5):
        assert nn.grad_check(kind, seed, 1e-3) < 1e-3


def test_grad_check_linear_is_tight():
    assert max(nn.grad_check("dense_linear", s) for s in range(3)) < 1e-7


def test_paramset_consistency():
    ps = nn.init_params(nn.dense_layers("d", (2, 3)), 0)
    ps.init_ema()
    ps.init_adam()
    ps.check_consistent()
    ps.ema["d.0.W"] = np.zeros((3, 2), np.float32)
    with pytest.raises(ValueError):
        ps.check_consistent()

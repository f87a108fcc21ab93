import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import TINY, finite_difference_check
from nrced import model as M
from nrced.loss import (DegenerateCorrelationWarning, batch_loss, batch_loss_grad, pearson_corr,
                        rowwise_corr)
from nrced.optim import adam_init, adam_step

finite = st.floats(-1e6, 1e6, allow_nan=False)


@pytest.fixture(scope="module")
def default_params():
    return M.init_params(M.ModelConfig(), 0)


# ------------------------------------------------------------------ config and init


def test_config_counts():
    cfg = M.ModelConfig()
    assert cfg.conv_stage_count == 2
    assert cfg.fc_layer_count == 6
    assert cfg.learning_rate == 5e-3 and cfg.activation == "tanh"
    layers, _ = M.build_layers(cfg)
    assert sum(isinstance(l, M.nn.Linear) for l in layers) == 6
    assert sum(isinstance(l, M.nn.Conv2d) for l in layers) == 2
    assert sum(isinstance(l, M.nn.ConvTranspose2d) for l in layers) == 2


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(bottleneck_dim=2560)
    with pytest.raises(ValueError):
        M.ModelConfig(conv_kernel=(2, 3))
    with pytest.raises(ValueError):
        M.ModelConfig(activation="relu")
    with pytest.raises(ValueError):
        M.ModelConfig.from_dict({"nonsense": 1})
    cfg = M.ModelConfig(in_channels=24, out_channels=10)
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_init_deterministic_and_bounded():
    a = M.init_params(TINY, 3)
    b = M.init_params(TINY, 3)
    c = M.init_params(TINY, 4)
    assert all(np.array_equal(a[k], b[k]) for k in a.arrays)
    assert any(not np.array_equal(a[k], c[k]) for k in a.arrays)
    for layer in a.layers:
        if isinstance(layer, (M.nn.Conv2d, M.nn.ConvTranspose2d)):
            w = a[layer.param_names[0]]
            bound = np.sqrt(6.0 / (layer.cin * w.shape[2] * w.shape[3]))
            assert np.all(np.abs(w) <= bound) and np.all(np.isfinite(w))
            assert not np.any(a[layer.param_names[1]])
        if isinstance(layer, M.nn.BatchNorm):
            assert np.all(a[layer.param_names[0]] == 1) and not np.any(a[layer.param_names[1]])


def test_final_layer_is_square(default_params):
    assert M.extract_last_layer(default_params).shape == (6144, 6144)
    assert M.extract_last_bias(default_params).shape == (6144,)
    names = default_params.encoder_names + default_params.decoder_names
    assert names == list(default_params.arrays)
    assert M.FINAL_WEIGHT in default_params.decoder_names


# ------------------------------------------------------------------ forward


def test_forward_shapes(default_params, rng):
    out = M.forward(default_params, rng.normal(size=(3, 10, 16, 16))).output
    assert out.shape == (3, 24, 16, 16)
    rev = M.init_params(M.ModelConfig(in_channels=24, out_channels=10), 1)
    assert M.forward(rev, rng.normal(size=(2, 24, 16, 16))).output.shape == (2, 10, 16, 16)
    with pytest.raises(M.ShapeMismatchError):
        M.forward(default_params, rng.normal(size=(2, 9, 16, 16)))


def test_zero_params_give_zero_output():
    p = M.init_params(TINY, 0)
    for k in p.arrays:
        p.arrays[k][...] = 0.0
    out = M.forward(p, np.zeros((4, 2, 4, 4))).output
    assert not np.any(out)


def test_eval_determinism(default_params, rng):
    x = rng.normal(size=(4, 10, 16, 16))
    a = M.forward(default_params, x, "eval").output
    b = M.forward(default_params, x, "eval").output
    assert np.array_equal(a, b)


def test_factorization_identity(default_params, rng):
    x = rng.normal(size=(10, 10, 16, 16))
    trace = M.forward(default_params, x, "eval")
    g = M.penultimate_features(trace)
    assert g.shape == (10, 6144)
    w, b = M.extract_last_layer(default_params), M.extract_last_bias(default_params)
    recon = g @ w.T + b
    assert np.abs(recon - trace.output.reshape(10, -1)).max() < 1e-9


def test_column_perturbation_is_linear(rng):
    p = M.init_params(TINY, 2)
    x = rng.normal(size=(5, 2, 4, 4))
    before = M.forward(p, x)
    j, delta = 7, 0.3
    p.arrays[M.FINAL_WEIGHT][:, j] += delta
    after = M.forward(p, x)
    change = (after.output - before.output).reshape(5, -1)
    expected = delta * before.features[:, j][:, None] * np.ones(change.shape[1])[None]
    np.testing.assert_allclose(change, expected, atol=1e-12)


# ------------------------------------------------------------------ loss


@given(arrays(np.float64, 20, elements=finite))
def test_pearson_self_and_negation(x):
    if np.ptp(x) < 1e-3:
        return
    assert pearson_corr(x, x) == pytest.approx(1.0, abs=1e-12)
    assert pearson_corr(x, -x) == pytest.approx(-1.0, abs=1e-12)


@given(arrays(np.float64, 20, elements=st.floats(-1e3, 1e3)), st.floats(1e-3, 1e3),
       st.floats(-1e3, 1e3))
def test_pearson_positive_affine(x, alpha, beta):
    if np.ptp(x) < 1e-2:
        return
    assert pearson_corr(x, alpha * x + beta) == pytest.approx(1.0, abs=1e-9)


@given(arrays(np.float64, 15, elements=finite), arrays(np.float64, 15, elements=finite))
def test_pearson_bounded(a, b):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateCorrelationWarning)
        assert -1.0 <= pearson_corr(a, b) <= 1.0


def test_pearson_degenerate_warns():
    with pytest.warns(DegenerateCorrelationWarning):
        assert pearson_corr(np.ones(5), np.ones(5)) == 0.0
    with pytest.raises(ValueError):
        pearson_corr([1.0], [2.0])


def test_pearson_matches_textbook(rng):
    a, b = rng.normal(size=(2, 50))
    num = sum((x - a.mean()) * (y - b.mean()) for x, y in zip(a, b))
    den = np.sqrt(sum((x - a.mean()) ** 2 for x in a) * sum((y - b.mean()) ** 2 for y in b))
    assert pearson_corr(a, b) == pytest.approx(num / den, abs=1e-13)


def test_batch_loss_examples(rng):
    t = rng.normal(size=(3, 2, 4, 4))
    assert batch_loss(t, t) == pytest.approx(-1.0)
    assert batch_loss(-t, t) == pytest.approx(1.0)
    u = np.array([[1.0, 2.0, 3.0, 4.0], [1.0, -1.0, -1.0, 1.0]])
    v = np.array([[2.0, 4.0, 6.0, 8.0], [1.0, 1.0, -1.0, -1.0]])
    assert rowwise_corr(u, v)[1] == 0.0
    assert batch_loss(u, v) == pytest.approx(-0.5)


@given(st.integers(0, 2**31 - 1))
def test_batch_loss_bounds_and_gradient(seed):
    r = np.random.default_rng(seed)
    o, t = r.normal(size=(2, 3, 12))
    loss, g = batch_loss_grad(o, t)
    assert -1.0 <= loss <= 1.0
    assert loss == pytest.approx(batch_loss(o, t), abs=1e-14)
    eps = 1e-6
    i = (int(r.integers(3)), int(r.integers(12)))
    o2 = o.copy()
    o2[i] += eps
    o3 = o.copy()
    o3[i] -= eps
    assert g[i] == pytest.approx((batch_loss(o2, t) - batch_loss(o3, t)) / (2 * eps), abs=1e-7)


# ------------------------------------------------------------------ backward


@pytest.mark.parametrize("seed", [11, 12])
def test_gradients_match_finite_differences(seed):
    assert finite_difference_check(seed) < 1e-4


def test_gradient_check_other_kernel_shape():
    cfg = replace(TINY, conv_kernel=(3, 1), in_channels=4, out_channels=2)
    assert finite_difference_check(5, cfg) < 1e-4


def test_backward_rejects_eval_trace(rng):
    p = M.init_params(TINY, 0)
    trace = M.forward(p, rng.normal(size=(2, 2, 4, 4)), "eval")
    with pytest.raises(ValueError):
        M.backward(p, trace, rng.normal(size=(2, 3, 4, 4)))


def test_gradient_vanishes_at_affine_optimum(rng):
    p = M.init_params(TINY, 1)
    x = rng.normal(size=(6, 2, 4, 4))
    trace = M.forward(p, x, "train", np.random.default_rng(0))
    targets = 2.5 * trace.output + 0.7
    loss, grads = M.backward(p, trace, targets)
    assert loss == pytest.approx(-1.0)
    assert np.abs(grads[M.FINAL_BIAS]).max() < 1e-10
    assert max(np.abs(g).max() for g in grads.values()) < 1e-8


def test_batch_gradient_is_mean_of_sample_gradients(rng):
    # without batch norm and dropout, samples do not interact
    cfg = replace(TINY, batch_norm=False, dropout_rate=0.0)
    p = M.init_params(cfg, 4)
    x = rng.normal(size=(4, 2, 4, 4))
    y = rng.normal(size=(4, 3, 4, 4))
    _, full = M.backward(p, M.forward(p, x, "train"), y)
    singles = [M.backward(p, M.forward(p, x[i:i + 1], "train"), y[i:i + 1])[1] for i in range(4)]
    for name in full:
        np.testing.assert_allclose(full[name], np.mean([s[name] for s in singles], axis=0),
                                   atol=1e-12)


# ------------------------------------------------------------------ Adam


def test_adam_first_step_is_lr_sign(rng):
    p = {"w": rng.normal(size=100)}
    start = p["w"].copy()
    g = rng.normal(size=100)
    state = adam_init(p)
    adam_step(p, {"w": g}, state)
    np.testing.assert_allclose(start - p["w"], 5e-3 * np.sign(g), rtol=1e-5)


def test_adam_zero_gradient_leaves_params(rng):
    p = {"w": rng.normal(size=10)}
    start = p["w"].copy()
    state = adam_init(p)
    for _ in range(3):
        adam_step(p, {"w": np.zeros(10)}, state)
    assert np.array_equal(p["w"], start)


def test_adam_scalar_quadratic():
    # 200 steps of Adam move a coordinate by at most about 200 * lr, so the
    # default 5e-3 cannot travel from 0 to 3; lr = 0.1 can.
    p = {"w": np.zeros(1)}
    state = adam_init(p, lr=0.1)
    for _ in range(200):
        adam_step(p, {"w": 2 * (p["w"] - 3.0)}, state)
    assert abs(p["w"][0] - 3.0) < 0.1
    slow = {"w": np.zeros(1)}
    state = adam_init(slow)
    for _ in range(200):
        adam_step(slow, {"w": 2 * (slow["w"] - 3.0)}, state)
    assert slow["w"][0] <= 200 * 5e-3 + 1e-9

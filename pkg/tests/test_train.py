import math

import numpy as np
import pytest

from ekan.datasets import RegressionDataset, gen_particle_scattering
from ekan.groups import builtin, trivial
from ekan.models import build_mlp, build_model, checkpoint_text, equivariance_residual
from ekan.reps import RepSpec
from ekan.train import Adam, NonFiniteLossError, TrainConfig, bce_with_logits, evaluate, fit, mse


def finite_difference(f, x, h=1e-6):
    out = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def test_mse_basics(rng):
    x = rng.normal(size=(5, 2))
    assert mse(x, x)[0] == 0.0
    t = rng.normal(size=(5, 2))
    np.testing.assert_allclose(mse(x, t)[1], finite_difference(lambda p: mse(p, t)[0], x), atol=1e-6)


def test_bce_basics(rng):
    assert math.isclose(bce_with_logits(np.zeros((1, 1)), np.ones((1, 1)))[0], math.log(2), rel_tol=1e-15)
    z = rng.normal(size=(6, 1)) * 3
    t = rng.integers(0, 2, size=(6, 1)).astype(float)
    np.testing.assert_allclose(bce_with_logits(z, t)[1], finite_difference(lambda p: bce_with_logits(p, t)[0], z),
                               atol=1e-6)


def test_bce_is_stable_for_large_logits():
    value, grad = bce_with_logits(np.array([[800.0], [-800.0]]), np.array([[1.0], [0.0]]))
    assert value == 0.0 and np.all(np.isfinite(grad))


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        mse(np.zeros((2, 1)), np.zeros((1, 2)))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": np.array([1.0, -2.0])}
        opt = Adam(0.1)
        for _ in range(3):
            opt.step(p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_has_magnitude_lr(self):
        for scale in (1e-3, 1.0, 1e4):
            p = {"w": np.zeros(3)}
            Adam(0.01).step(p, {"w": np.array([1.0, -2.0, 0.5]) * scale})
            # eps = 1e-8 shortens the step by at most |g| / (|g| + eps)
            np.testing.assert_allclose(np.abs(p["w"]), 0.01, rtol=1e-4)

    def test_quadratic_converges(self):
        p = {"w": np.array([3.0])}
        opt = Adam(1e-2)
        for _ in range(2000):
            opt.step(p, {"w": 2.0 * (p["w"] - 1.5)})
        assert abs(p["w"][0] - 1.5) <= 1e-6


def linear_toy(rng, n=400):
    group = trivial(1)
    w = rng.normal(size=(2, 3))
    x = rng.normal(size=(n, 3))
    return RegressionDataset(x, x @ w.T, RepSpec(group, ((0, 0, 3),)), RepSpec(group, ((0, 0, 2),))), w


def test_linear_toy_recovers_weights(rng):
    data, w = linear_toy(rng)
    model = build_mlp([3, 2], rng=0)
    _, metrics = fit(model, data, TrainConfig(epochs=600, learning_rate=1e-2, batch_size=100))
    np.testing.assert_allclose(model.layers[0].params["weight"], w, atol=1e-3)
    np.testing.assert_allclose(model.layers[0].params["bias"], 0.0, atol=1e-3)
    epoch_means = np.array(metrics.train_loss[:100])
    assert np.all(np.diff(epoch_means) < 0)


def test_zero_epochs_leaves_model_unchanged(rng):
    data, _ = linear_toy(rng, n=20)
    model = build_mlp([3, 2], rng=0)
    before = checkpoint_text(model)
    _, metrics = fit(model, data, TrainConfig(epochs=0), test=data)
    assert checkpoint_text(model) == before
    assert metrics.train_loss == [] and metrics.test_mse is not None


def small_scattering():
    data = gen_particle_scattering(120, np.random.default_rng(5), "so13p")
    return data.split(100)


def test_training_is_bit_reproducible():
    train, test = small_scattering()
    texts = []
    for _ in range(2):
        model = build_model("so13p", "4T1", "T0", [16], rng=2)
        fit(model, train, TrainConfig(epochs=12, batch_size=40, seed=9), test)
        texts.append(checkpoint_text(model))
    assert texts[0] == texts[1]


def test_training_keeps_equivariance():
    train, test = small_scattering()
    model = build_model("so13p", "4T1", "T0", [16], rng=2)
    _, metrics = fit(model, train, TrainConfig(epochs=12, batch_size=40), test)
    assert metrics.train_loss[-1] < metrics.train_loss[0]
    assert equivariance_residual(model, rng=0, scale=0.5) <= 1e-6
    assert metrics.num_parameters == sum(p.size for _, p in model.named_parameters())


def test_non_finite_loss_is_reported(rng):
    data, _ = linear_toy(rng, n=20)
    model = build_mlp([3, 2], rng=0)
    model.layers[0].params["weight"][0, 0] = np.inf
    with pytest.raises(NonFiniteLossError, match="epoch 0 batch 0"):
        fit(model, data, TrainConfig(epochs=1))


def test_accuracy_metric(rng):
    group = builtin("o13")
    x = rng.normal(size=(4, 12))
    data = RegressionDataset(x, np.array([[1.0], [0.0], [1.0], [0.0]]), RepSpec(group, ((1, 0, 3),)),
                             RepSpec(group, ((0, 0, 1),)))
    model = build_mlp([12, 1], rng=0)
    model.layers[0].params["weight"][...] = 0.0
    model.layers[0].params["bias"][...] = [1.0]
    result = evaluate(model, data, "bce_with_logits")
    assert result["accuracy"] == 0.5


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(loss="hinge")

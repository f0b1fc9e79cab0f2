import numpy as np
import pytest

from ekan.groups import builtin
from ekan.layers import EkanLayer, LiftLayer, TakeFirst
from ekan.models import (
    allocate_latent,
    attach_reps,
    build_emlp,
    build_kan,
    build_mlp,
    build_model,
    checkpoint_text,
    equivariance_residual,
    kan_parameter_count,
    load_checkpoint,
    matched_width,
    mlp_parameter_count,
    save_checkpoint,
)
from ekan.reps import parse_rep

LORENTZ = builtin("o13")
SO2 = builtin("so2")


@pytest.mark.parametrize(
    "group_name, d, expected",
    [
        ("o13", 64, "16*T0+8*T1+T2"),
        ("so2", 32, "8*T0+8*T1+2*T2"),
        ("o13", 5, "T0+T1"),
        ("so2", 3, "T0+T1"),
        ("o13", 1000, "260*T0+125*T1+15*T2"),
    ],
)
def test_allocation_rule(group_name, d, expected):
    rep = allocate_latent(builtin(group_name), d)
    assert str(rep) == expected
    assert rep.dim == d


def test_allocation_too_small():
    with pytest.raises(ValueError, match="cannot hold"):
        allocate_latent(LORENTZ, 4)


def test_build_structure():
    model = build_model(LORENTZ, "4T1", "T0", [64])
    kinds = [type(layer) for layer in model.layers]
    assert kinds == [LiftLayer, EkanLayer, EkanLayer, TakeFirst]
    assert model.forward(np.zeros((2, 16))).shape == (2, 1)


def test_wide_hidden_layer_is_accepted():
    model = build_model(LORENTZ, "4T1", "T0", [1000])
    assert model.spaces[1].dim == 1000


def test_needs_hidden_layers():
    with pytest.raises(ValueError):
        build_model(LORENTZ, "4T1", "T0", [])


def test_lift_spaces():
    model = build_model(LORENTZ, "4T1", "T0", [64], lift_rank=2, lift_scalars=5)
    assert str(model.spaces[0]) == "5*T0+4*T1"
    linear = build_model(LORENTZ, "4T1", "T0", [64], lift="linear")
    assert str(linear.spaces[0]) == "4*T1"


def test_fresh_models_are_equivariant(group):
    feature, label = ("24T1", "6T1") if group.n == 2 else ("4T1", "T0")
    model = build_model(group, feature, label, [32 if group.n == 2 else 64], rng=3)
    assert equivariance_residual(model, rng=0, scale=0.5 if group.n == 4 else None) <= 1e-6


def test_emlp_is_equivariant():
    model = build_emlp(SO2, "4T1", "2T1", [16], rng=0)
    assert equivariance_residual(model, rng=1) <= 1e-10


def test_mlp_is_not_equivariant():
    model = attach_reps(build_mlp([8, 16, 4], rng=0), SO2, "4T1", "2T1")
    assert equivariance_residual(model, rng=1) > 1e-3


def test_identity_only_audit():
    model = build_model(SO2, "2T1", "T1", [8])
    assert equivariance_residual(model, identity_only=True) <= 1e-12


def test_mlp_identity_activation_is_linear(rng):
    model = build_mlp([3, 5, 2], rng=0, activation="identity")
    x = rng.normal(size=(4, 3))
    w1, b1 = model.layers[0].params["weight"], model.layers[0].params["bias"]
    w2, b2 = model.layers[2].params["weight"], model.layers[2].params["bias"]
    np.testing.assert_allclose(model.forward(x), (x @ w1.T + b1) @ w2.T + b2, atol=1e-14)


def test_parameter_counts():
    assert build_kan([16, 3840, 1]).num_parameters == kan_parameter_count([16, 3840, 1]) == 7 * (16 * 3840 + 3840)
    assert build_mlp([4, 5, 2]).num_parameters == mlp_parameter_count([4, 5, 2]) == 4 * 5 + 5 + 5 * 2 + 2


def test_matched_width():
    target = 10_000
    width = matched_width(lambda h: kan_parameter_count([16, h, 1]), target)
    best = min(range(1, 200), key=lambda h: abs(kan_parameter_count([16, h, 1]) - target))
    assert width == best


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    model = build_model(LORENTZ, "4T1", "T0", [16], rng=0)
    model.update_grids(rng.normal(0, 0.3, size=(50, 16)))
    path = tmp_path / "m.json"
    save_checkpoint(model, path, {"note": 1})
    loaded, extra = load_checkpoint(path)
    assert extra == {"note": 1}
    x = rng.normal(size=(5, 16))
    np.testing.assert_array_equal(loaded.forward(x), model.forward(x))
    assert checkpoint_text(loaded, {"note": 1}) == path.read_text()


@pytest.mark.parametrize("builder", [
    lambda: build_kan([3, 4, 2], rng=1),
    lambda: build_mlp([3, 4, 2], rng=1),
    lambda: build_emlp(SO2, "T1+T0", "T1", [6], rng=1),
])
def test_baseline_checkpoints(builder, tmp_path, rng):
    model = builder()
    save_checkpoint(model, tmp_path / "b.json")
    loaded, _ = load_checkpoint(tmp_path / "b.json")
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(loaded.forward(x), model.forward(x))


def test_same_seed_same_model():
    a = checkpoint_text(build_model(SO2, "4T1", "T1", [12], rng=7))
    b = checkpoint_text(build_model(SO2, "4T1", "T1", [12], rng=7))
    assert a == b


def test_bad_checkpoint(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(ValueError, match="not an EKAN checkpoint"):
        load_checkpoint(path)


def test_reps_accept_strings_and_objects():
    a = build_model("so2", "2T1", "T1", [6], rng=0)
    b = build_model(SO2, parse_rep("2T1", SO2), parse_rep("T1", SO2), [6], rng=0)
    assert checkpoint_text(a) == checkpoint_text(b)

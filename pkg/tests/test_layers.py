import numpy as np
import pytest

from _oracles import finite_difference_check
from ekan.groups import builtin, sample_element
from ekan.layers import EkanLayer, EmlpLayer, KanLayer, LiftLayer, grid_update
from ekan.models import build_model
from ekan.reps import parse_rep
from ekan.solver import solve
from ekan.splines import SplineGrid, uniform_grid

SO2 = builtin("so2")


def gated_input(layer, rng, n=20, scale=0.7):
    return rng.normal(0.0, scale, size=(n, layer.rep_gin.dim))


def test_post_activation_dimension():
    layer = EkanLayer(parse_rep("T0+T1", SO2), parse_rep("T1", SO2), grid_intervals=1, spline_order=1,
                      rng=np.random.default_rng(0))
    assert str(layer.rep_gin) == "T0+T1+T0"
    v_m = layer.gated_basis(np.ones((1, 4)))
    assert v_m.reshape(1, -1).shape == (1, 9)


def test_indicator_basis_copies_input():
    layer = EkanLayer(parse_rep("T0+T1", SO2), parse_rep("T1", SO2), grid_intervals=4, spline_order=0,
                      rng=np.random.default_rng(0))
    v = np.array([[0.1, 0.3, -0.2, 0.1]])  # both gates at 0.1 -> interval 2 of [-1, 1]
    v_m = layer.gated_basis(v)[0]
    x = v[0, :3]
    np.testing.assert_allclose(v_m[2], x)
    np.testing.assert_allclose(v_m[[0, 1, 3]], 0.0)
    np.testing.assert_allclose(v_m[4], x * 0.1 / (1 + np.exp(-0.1)))


def test_gated_basis_equivariance(group, rng):
    rep_in = parse_rep("2T0+T1+T(1,1)", group)
    layer = EkanLayer(rep_in, parse_rep("T1", group), rng=rng)
    v = gated_input(layer, rng)
    base = layer.gated_basis(v)
    for _ in range(10):
        g = sample_element(group, rng)
        moved = layer.gated_basis(v @ layer.rep_gin.rho(g).T)
        np.testing.assert_allclose(moved, base @ rep_in.rho(g).T, atol=1e-8)


def test_layer_forward_equivariance(group, rng):
    layer = EkanLayer(parse_rep("T0+T1+T2", group), parse_rep("2T0+T1+T(1,1)", group), rng=rng)
    v = gated_input(layer, rng)
    out = layer.forward(v)
    for _ in range(10):
        g = sample_element(group, rng)
        moved = layer.forward(v @ layer.rep_gin.rho(g).T)
        np.testing.assert_allclose(moved, out @ layer.rep_gout.rho(g).T, atol=1e-7 * (1 + np.abs(out).max()))


def test_zero_weights_give_zero_output(rng):
    layer = EkanLayer(parse_rep("T0+T1", SO2), parse_rep("T1", SO2), rng=rng)
    layer.params["weight"][...] = 0.0
    np.testing.assert_array_equal(layer.forward(gated_input(layer, rng)), 0.0)


def test_stored_weights_are_projected_in_forward(rng):
    layer = EkanLayer(parse_rep("T1", SO2), parse_rep("T1", SO2), rng=rng)
    v = gated_input(layer, rng)
    out = layer.forward(v)
    layer.params["weight"] += rng.normal(size=layer.params["weight"].shape)  # arbitrary, mostly non-equivariant
    g = sample_element(SO2, rng)
    out = layer.forward(v)
    np.testing.assert_allclose(layer.forward(v @ layer.rep_gin.rho(g).T), out @ layer.rep_gout.rho(g).T, atol=1e-10)


def test_backward_zero_upstream(rng):
    layer = EkanLayer(parse_rep("T0+T1", SO2), parse_rep("T1", SO2), rng=rng)
    layer.forward(gated_input(layer, rng))
    dx = layer.backward(np.zeros((20, layer.d_gout)))
    np.testing.assert_array_equal(dx, 0.0)
    np.testing.assert_array_equal(layer.grads["weight"], 0.0)


@pytest.mark.parametrize("lift", ["quadratic", "linear"])
def test_gradients_match_finite_differences(group, lift, rng):
    feature, label = ("2T1", "T0+T1") if group.n == 2 else ("T1+T0", "T0+T1")
    model = build_model(group, feature, label, [6], rng=rng, lift=lift, lift_rank=1)
    x = rng.normal(0.0, 0.5, size=(8, model.rep_in.dim))
    assert finite_difference_check(model, x, rng) <= 1e-4


def test_input_gradient(rng):
    model = build_model(SO2, "2T1", "T1", [6], rng=rng)
    x = rng.normal(0.0, 0.5, size=(4, 4))
    r = rng.normal(size=(4, 2))
    model.forward(x)
    dx = model.backward(r)
    h = 1e-6
    for i, j in [(0, 0), (1, 3), (3, 2)]:
        e = np.zeros_like(x)
        e[i, j] = h
        fd = (np.sum(model.forward(x + e) * r) - np.sum(model.forward(x - e) * r)) / (2 * h)
        np.testing.assert_allclose(dx[i, j], fd, rtol=1e-6, atol=1e-9)


def test_least_squares_gradient_in_linear_region(rng):
    # k=1 splines on a single interval: the layer is linear in its weights, and
    # the MSE gradient has the closed form (2/N) (W V - Y) V^T.
    group = builtin("trivial")
    rep = parse_rep("T0", group)
    layer = EkanLayer(rep, rep, grid_intervals=1, spline_order=1, rng=rng)
    v = np.array([[0.2], [-0.4]])
    y = np.array([[0.3], [0.1]])
    out = layer.forward(v)
    layer.backward(2.0 * (out - y) / 2)
    v_m = layer.gated_basis(v).reshape(2, -1)
    expected = (2.0 / 2) * (out - y).T @ v_m
    np.testing.assert_allclose(layer.grads["weight"][:, 0, 0], expected[0], atol=1e-14)


class TestGridUpdate:
    def make_layer(self, rng):
        return EkanLayer(parse_rep("T0+T1", SO2), parse_rep("T0+T1", SO2), rng=rng)

    def test_same_grids_fixed_point(self, rng):
        layer = self.make_layer(rng)
        batch = gated_input(layer, rng, n=200)
        before = layer.effective_weight()
        out = layer.forward(batch)
        grid_update(layer, batch, new_grids=layer.grids)
        np.testing.assert_allclose(layer.effective_weight(), before, atol=1e-8)
        np.testing.assert_allclose(layer.forward(batch), out, atol=1e-10)

    @pytest.mark.parametrize("method", ["constrained", "projected"])
    def test_outputs_nearly_preserved(self, method, rng):
        # Old and new spline spaces are not nested, so some change is unavoidable;
        # with samples filling the old grid range it stays small.
        layer = self.make_layer(rng)
        batch = rng.uniform(-1, 1, size=(500, layer.rep_gin.dim))
        report = grid_update(layer, batch, method=method)
        assert report["relative_change"] <= 1e-3
        w = layer.effective_weight()
        for _ in range(5):
            g = sample_element(SO2, rng)
            np.testing.assert_allclose(layer.rep_gout.rho(g) @ w, w @ layer.rep_in.rho(g), atol=1e-6)

    def test_refit_is_least_squares_optimal(self, rng):
        layer = self.make_layer(rng)
        batch = rng.normal(0.0, 0.6, size=(300, layer.rep_gin.dim))
        target = layer.forward(batch)
        grid_update(layer, batch)
        v_m = layer.gated_basis(batch).reshape(len(batch), -1)
        stacked = layer.rep_in.post_activation(layer.grid_intervals, layer.spline_order)
        basis = solve(layer.rep_gout, stacked).basis_matrices()
        design = np.stack([(v_m @ b.T).ravel() for b in basis], axis=1)
        coef = np.linalg.lstsq(design, target.ravel(), rcond=None)[0]
        best = np.linalg.norm(design @ coef - target.ravel())
        np.testing.assert_allclose(np.linalg.norm(layer.forward(batch) - target), best, rtol=1e-6, atol=1e-12)

    def test_new_grids_follow_gate_values(self, rng):
        layer = self.make_layer(rng)
        batch = rng.uniform(-3, 2, size=(100, layer.rep_gin.dim))
        grid_update(layer, batch)
        gates = layer.gate_inputs(batch)
        for c, grid in enumerate(layer.grids):
            assert grid.base_knots[0] < gates[:, c].min() and grid.base_knots[-1] > gates[:, c].max()

    def test_rank_deficient_batch_does_not_fail(self, rng):
        layer = self.make_layer(rng)
        batch = np.repeat(gated_input(layer, rng, n=1), 5, axis=0)
        batch[:, 0] += np.linspace(0, 1e-3, 5)
        report = grid_update(layer, batch)
        assert np.isfinite(report["relative_change"])

    def test_needs_two_samples(self, rng):
        layer = self.make_layer(rng)
        with pytest.raises(ValueError):
            grid_update(layer, gated_input(layer, rng, n=1))

    def test_grid_shape_checked(self, rng):
        layer = self.make_layer(rng)
        with pytest.raises(ValueError):
            layer.grids = [uniform_grid(4, 3)] * layer.channels


def test_linear_lift_cannot_reach_scalars_from_vectors(rng):
    # Under the proper orthochronous Lorentz group there is no nonzero equivariant
    # linear map T1 -> T0 or T1 -> T2, so a purely linear lift of 4T1 data leaves the
    # first layer without scalars, and no gate can produce an invariant output.
    group = builtin("so13p")
    model = build_model(group, "4T1", "T0", [64], rng=rng, lift="linear")
    assert model.layers[0].solution.rank == 4 * 4
    x = rng.normal(size=(50, 16))
    np.testing.assert_array_equal(model.forward(x), 0.0)
    quadratic = build_model(group, "4T1", "T0", [64], rng=rng)
    assert np.abs(quadratic.forward(x)).max() > 0


def test_quadratic_lift_features_are_invariant(rng):
    group = builtin("o13")
    rep = parse_rep("2T1", group)
    lift = LiftLayer(rep, parse_rep("3T0+2T1", group).gated(), rng, quadratic=True, rank=2)
    x = rng.normal(size=(10, 8))
    out = lift.forward(x)
    for _ in range(5):
        g = sample_element(group, rng)
        np.testing.assert_allclose(lift.forward(x @ rep.rho(g).T), out @ lift.rep_target.rho(g).T, atol=1e-9)


def test_kan_layer_basis_form_equals_per_edge_form(rng):
    layer = KanLayer(1, 1, rng=rng)
    x = rng.uniform(-1.5, 1.5, size=(50, 1))
    np.testing.assert_allclose(layer.forward(x), layer.forward_per_edge(x), rtol=0, atol=1e-12)
    wide = KanLayer(3, 2, rng=rng)
    wide.grids = [SplineGrid(np.array([-2.0, -0.5, 0.0, 0.7]), 3)] * 3
    x = rng.normal(size=(20, 3))
    np.testing.assert_allclose(wide.forward(x), wide.forward_per_edge(x), rtol=0, atol=1e-12)


def test_emlp_layer_equivariance(group, rng):
    layer = EmlpLayer(parse_rep("T0+T1", group), parse_rep("T0+T1+T2", group), rng)
    x = rng.normal(size=(10, layer.rep_in.dim))
    out = layer.forward(x)
    for _ in range(10):
        g = sample_element(group, rng)
        np.testing.assert_allclose(layer.forward(x @ layer.rep_in.rho(g).T), out @ layer.rep_out.rho(g).T, atol=1e-9)

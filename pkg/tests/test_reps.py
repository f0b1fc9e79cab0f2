import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ekan.groups import builtin, sample_element
from ekan.linalg import expm
from ekan.reps import RepParseError, RepSpec, parse_rep, tensor_square_layout

SO2 = builtin("so2")
O13 = builtin("o13")


def test_dimensions():
    assert parse_rep("3*T0+2*T1", SO2).dim == 7
    assert parse_rep("T(1,1)", O13).dim == 16
    assert parse_rep("T3", SO2).dim == 8


def test_rho_of_dual_is_inverse_transpose(rng):
    g = sample_element(O13, rng)
    np.testing.assert_allclose(parse_rep("T(0,1)", O13).rho(g), np.linalg.inv(g).T, atol=1e-12)


def test_rho_of_tensor_by_explicit_contraction(rng):
    # (g . T)^{a}_{b} = g^a_c T^c_d (g^{-1})^d_b
    g = sample_element(O13, rng)
    t = rng.normal(size=(4, 4))
    expected = g @ t @ np.linalg.inv(g)
    got = parse_rep("T(1,1)", O13).rho(g) @ t.ravel()
    np.testing.assert_allclose(got, expected.ravel(), atol=1e-10)


def test_rho_is_homomorphism(group, rng):
    rep = RepSpec.canonical(group, 2, [(1, 0, 1), (0, 1, 1), (1, 1, 1)])
    g, h = sample_element(group, rng), sample_element(group, rng)
    np.testing.assert_allclose(rep.rho(g @ h), rep.rho(g) @ rep.rho(h), atol=1e-9)


def test_drho_exponentiates_to_rho(group, rng):
    rep = parse_rep("T0+T1+T(1,1)+T2", group)
    for a in group.lie_generators:
        t = rng.uniform(-0.5, 0.5)
        np.testing.assert_allclose(rep.rho(expm(t * a)), expm(t * rep.drho(a)), atol=1e-10)


def test_scalars_are_invariant(rng):
    rep = parse_rep("3T0", O13)
    np.testing.assert_array_equal(rep.rho(sample_element(O13, rng)), np.eye(3))


def test_gated_appends_one_gate_per_term():
    rep = parse_rep("2T0+3T1+T2", SO2).gated()
    assert str(rep) == "2*T0+3*T1+T2+4*T0"
    assert rep.dim == 2 + 6 + 4 + 4


def test_post_activation_repeats():
    rep = parse_rep("T0+T1", SO2)
    assert rep.post_activation(1, 1).dim == 9
    with pytest.raises(ValueError):
        rep.post_activation(0, 1)


def test_canonical_order():
    rep = RepSpec.canonical(SO2, 2, [(1, 0, 1)])
    assert rep.is_canonical() and rep.leading_scalars == 2
    assert not parse_rep("T1+T0", SO2).is_canonical()
    with pytest.raises(ValueError):
        RepSpec.canonical(SO2, 1, [(0, 0, 1)])


def test_rank_limit():
    with pytest.raises(ValueError, match="rank"):
        RepSpec(SO2, ((2, 2, 1),))


@pytest.mark.parametrize(
    "text, position",
    [("", 0), ("T1+", 3), ("2*X1", 0), ("T1 T2", 3), ("T(1,)", 0), ("T(2,2)", 0)],
)
def test_parse_errors_report_position(text, position):
    with pytest.raises(RepParseError) as info:
        parse_rep(text, SO2)
    assert info.value.position == position


def test_parse_keeps_block_order():
    assert parse_rep("T1 + 2T0 + T(1,1)", SO2).blocks == ((1, 0, 1), (0, 0, 2), (1, 1, 1))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 1), st.integers(1, 4)), min_size=1, max_size=4))
def test_str_parse_round_trip(blocks):
    rep = RepSpec(SO2, tuple(blocks))
    assert parse_rep(str(rep), SO2) == rep


def test_tensor_square_layout_transforms_as_kron(rng):
    rep = parse_rep("T0+T1", SO2)
    g = sample_element(SO2, rng)
    x = rng.normal(size=rep.dim)
    xx = np.kron(x, x)
    gx = rep.rho(g) @ x
    lay = tensor_square_layout(rep)
    for word, idx in lay.items():
        block = RepSpec(SO2, ((word.count(1), word.count(-1), 1),))
        for row in idx:
            np.testing.assert_allclose(np.kron(gx, gx)[row], block.rho(g) @ xx[row], atol=1e-12)
    assert sorted(np.concatenate([i.ravel() for i in lay.values()])) == list(range(9))

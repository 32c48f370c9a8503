import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdrelax.catalog import get_density, list_catalog, parse_density
from sdrelax.densities import (
    DimensionError,
    RecessionUndefined,
    eval_bulk,
    eval_surface,
    recession_density,
    recession_estimate,
)

LADDER = (10.0, 1e2, 1e3, 1e4)


def test_quadratic_at_identity():
    assert eval_bulk(get_density("quadratic", 2, 2), [0, 0], np.eye(2)) == 2.0


def test_linear_at_zero():
    assert eval_bulk(get_density("linear", 2, 2), [0, 0], np.zeros((2, 2))) == 0.0


def test_space_dependent_bulk():
    _, W = parse_density("(1 + x[0]^2) * normsq(A)", "bulk", 2, 2)
    assert eval_bulk(W, [1, 0], [[1, 0], [0, 0]]) == 2.0
    assert not W.homogeneous


def test_norm_jump_value():
    psi = get_density("norm-jump", 2, 2)
    assert eval_surface(psi, [0, 0], [3, 4], [0, 1]) == 5.0
    assert eval_surface(psi, [0, 0], [0, 0], [1, 0]) == 0.0


def test_anisotropic_orthogonal():
    psi = get_density("anisotropic", 2, 2)
    assert eval_surface(psi, [0, 0], [1, 0], [0, 1]) == 0.0


def test_bulk_dimension_mismatch():
    with pytest.raises(DimensionError):
        eval_bulk(get_density("quadratic", 2, 2), [0, 0], np.eye(3))


def test_bulk_non_finite():
    with pytest.raises(ValueError):
        eval_bulk(get_density("quadratic", 2, 2), [0, np.nan], np.eye(2))


def test_surface_non_unit_normal():
    with pytest.raises(ValueError, match="unit"):
        eval_surface(get_density("norm-jump", 2, 2), [0, 0], [1, 0], [0, 2])


def test_recession_perturbed_linear():
    W = get_density("perturbed-linear", 2, 2)
    A = np.array([[1.0, 0.0], [0.0, 0.0]])
    # the declared closed form is returned exactly, with ladder agreement reported
    r = recession_estimate(W, [0, 0], A, LADDER)
    assert r.value == pytest.approx(1.0, abs=1e-2)
    _, Wd = parse_density("sqrt(1 + normsq(A))", "bulk", 2, 2, p=1)
    r = recession_estimate(Wd, [0, 0], A, LADDER)
    assert r.value == pytest.approx(1.0, abs=1e-2)
    assert r.spread < 1e-2


def test_recession_homogeneous_exact():
    W = get_density("linear", 2, 2)
    A = np.array([[0.6, 0.0], [0.0, 0.8]])
    assert recession_estimate(W, [0, 0], A, LADDER).value == 1.0


def test_recession_oscillating_decay():
    _, W = parse_density("norm(A) + sin(norm(A))/(1 + norm(A))", "bulk", 1, 1, p=1)
    r = recession_estimate(W, 0.0, [[1.0]], LADDER)
    assert r.value == pytest.approx(1.0, abs=1e-1)
    # error of each ratio is bounded by 1/t
    for t, ratio in zip(r.ladder, r.ratios):
        assert abs(ratio - 1.0) <= 1.0 / t


def test_recession_short_ladder():
    with pytest.raises(ValueError, match="3"):
        recession_estimate(get_density("linear", 1, 1), 0.0, [[1.0]], (10, 100))


def test_recession_divergent():
    with pytest.raises(RecessionUndefined, match="undefined"):
        recession_estimate(get_density("quadratic", 1, 1), 0.0, [[1.0]], LADDER)


def test_recession_density_closed_form():
    rec, err = recession_density(get_density("linear", 1, 1))
    assert rec(np.zeros((1, 1)), np.array([[[2.5]]]))[0] == 2.5


@settings(max_examples=200, deadline=None)
@given(
    st.floats(1e-3, 1e3),
    st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2),
    st.floats(0, 2 * np.pi),
)
def test_norm_jump_homogeneity(t, lam, ang):
    psi = get_density("norm-jump", 2, 2)
    nu = [np.cos(ang), np.sin(ang)]
    lam = np.array(lam)
    lhs = eval_surface(psi, [0, 0], t * lam, nu)
    assert lhs == pytest.approx(t * eval_surface(psi, [0, 0], lam, nu), rel=1e-14, abs=1e-300)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e2, 1e2), min_size=4, max_size=4), st.floats(1.5, 1e2))
def test_homogeneous_recession_is_exact(entries, t):
    W = get_density("linear", 2, 2)
    A = np.array(entries).reshape(2, 2)
    nA = np.linalg.norm(A)
    if nA < 1e-6:
        return
    r = recession_estimate(W, [0, 0], A / nA, (t, 2 * t, 4 * t))
    assert r.value == pytest.approx(1.0, rel=1e-12)


def test_list_catalog():
    rows = {r["name"]: r for r in list_catalog()}
    assert len(rows) >= 6
    assert rows["quadratic"]["p"] == 2
    assert rows["norm-jump"]["lower_const"] == rows["norm-jump"]["upper_const"] == 1

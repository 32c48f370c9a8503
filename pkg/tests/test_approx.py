import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdrelax.approx import (
    DoubleFamily,
    MultiLevelDeformation,
    StructuredDeformation,
    build_determining_sequence,
    build_multilevel_sequence,
    constant_family,
    inner_limit,
    multilevel_family,
    on_common_grid,
    verify_hsd_convergence,
)
from sdrelax.sbv import CubeGrid, affine_field, l1_distance, make_field


def identity(n=16):
    g = CubeGrid(1, 1, n, center=(0.5,))
    return affine_field(g, 1.0, a=0.5, x0=(0.5,))


def dist(f, g):
    return l1_distance(*on_common_grid(f, g))


# two-level sequences

@pytest.mark.parametrize("n,expected", [(4, 1 / 8), (8, 1 / 16), (16, 1 / 32)])
def test_staircase_sequence(n, expected):
    g = identity()
    u = build_determining_sequence(StructuredDeformation(g, 0.0, 2), n)
    assert not u.gradients.any()
    assert dist(u, g) == pytest.approx(expected, abs=1e-12)


def test_compatible_target_reproduces_g():
    g = identity()
    for n in (2, 4, 8):
        u = build_determining_sequence(StructuredDeformation(g, 1.0, 2), n)
        assert dist(u, g) == 0.0


def test_slope_two_sequence_halves():
    g = identity()
    d = [dist(build_determining_sequence(StructuredDeformation(g, 2.0, 2), n), g)
         for n in (4, 8, 16, 32)]
    for a, b in zip(d, d[1:]):
        assert b / a == pytest.approx(0.5, rel=0.1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2]), st.sampled_from([2, 4, 8]))
def test_sequence_gradient_exact(seed, N, n):
    rng = np.random.default_rng(seed)
    grid = CubeGrid(N, 1, 4)
    g = make_field(grid, values=rng.normal(size=(grid.ncells, 1)),
                   gradients=rng.normal(size=(grid.ncells, 1, N)))
    G = rng.normal(size=(grid.ncells, 1, N))
    u = build_determining_sequence(StructuredDeformation(g, G, 2), n)
    k = u.grid.n // grid.n
    expected = np.repeat(G.reshape((grid.n,) * N + (1, N)), k, axis=0)
    if N == 2:
        expected = np.repeat(expected, k, axis=1)
    assert np.array_equal(u.gradients, expected.reshape(u.gradients.shape))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2]))
def test_l1_decay_constant_targets(seed, N):
    rng = np.random.default_rng(seed)
    grid = CubeGrid(N, 1, 2)
    A = rng.normal(size=(1, N))
    G = rng.normal(size=(1, N))
    if np.abs(A - G).max() < 1e-2:
        return
    g = affine_field(grid, A)
    sd = StructuredDeformation(g, G, 2)
    d = [dist(build_determining_sequence(sd, n), g) for n in (8, 16)]
    assert d[1] / d[0] == pytest.approx(0.5, rel=0.1)


# three-level sequences

def x02():
    return MultiLevelDeformation(identity(), 0.0, 2.0, 2)


def test_multilevel_gradients():
    ml = x02()
    u = build_multilevel_sequence(ml, 4, 4)
    assert np.all(u.gradients == 2.0)
    assert not inner_limit(ml, 4).gradients.any()


@pytest.mark.parametrize("n1,n2", [(2, 4), (4, 4), (8, 2), (16, 16)])
def test_multilevel_gradient_identity(n1, n2):
    ml = MultiLevelDeformation(identity(), -0.5, 1.5, 2)
    assert np.all(build_multilevel_sequence(ml, n1, n2).gradients == 1.5)
    assert np.all(inner_limit(ml, n1).gradients == -0.5)


def test_multilevel_compatible_is_g():
    g = identity()
    ml = MultiLevelDeformation(g, 1.0, 1.0, 2)
    for n1, n2 in [(2, 2), (4, 8)]:
        assert dist(build_multilevel_sequence(ml, n1, n2), g) == 0.0


def test_multilevel_equal_levels_reduce_to_two_level():
    g = identity()
    ml = MultiLevelDeformation(g, 0.0, 0.0, 2)
    two = build_determining_sequence(StructuredDeformation(g, 0.0, 2), 4)
    three = build_multilevel_sequence(ml, 4, 8)
    assert dist(two, three) == pytest.approx(0.0, abs=1e-14)


def test_inner_limit_converges_to_g():
    g = identity()
    ml = x02()
    d = [dist(inner_limit(ml, n), g) for n in (4, 8, 16)]
    assert d[0] > d[1] > d[2]


# convergence verification

def test_x02_passes_all_clauses():
    ml = x02()
    report = verify_hsd_convergence(multilevel_family(ml), ml)
    assert report.verdicts == {"(i)": "pass", "(ii)": "pass", "(iii)": "pass"}
    assert report.rates["(i)"] == pytest.approx(1.0, abs=0.1)


def test_swapped_order_fails_clause_ii():
    ml = x02()
    report = verify_hsd_convergence(multilevel_family(ml).swapped(), ml)
    assert report.verdicts["(ii)"] == "fail"


def test_constant_family_passes():
    g = identity()
    report = verify_hsd_convergence(constant_family(g), MultiLevelDeformation(g, 1.0, 1.0, 2))
    assert set(report.verdicts.values()) == {"pass"}


def test_oscillating_family_fails_clause_i():
    g = identity()

    def member(n1, n2):
        return make_field(g.grid, values=g.values + np.sin(n1), gradients=g.gradients)

    fam = DoubleFamily(member, label="sin")
    report = verify_hsd_convergence(fam, MultiLevelDeformation(g, 1.0, 1.0, 2))
    assert report.verdicts["(i)"] == "fail"


def test_short_ladder():
    ml = x02()
    with pytest.raises(ValueError, match="3"):
        verify_hsd_convergence(multilevel_family(ml), ml, ladder=(2, 4))


def test_sd_mode_reports_gradient_bound():
    ml = MultiLevelDeformation(identity(), 0.0, 2.0, 2, mode="SD")
    report = verify_hsd_convergence(multilevel_family(ml), ml)
    assert report.sup_grad_norm == pytest.approx(2.0)


def test_mode_validation():
    with pytest.raises(ValueError):
        MultiLevelDeformation(identity(), 0.0, 2.0, 2, mode="XY")

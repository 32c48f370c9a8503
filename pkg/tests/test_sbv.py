import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from sdrelax.catalog import get_density
from sdrelax.sbv import (
    CubeGrid,
    EnergyModel,
    affine_field,
    alberti_constants,
    boundary_trace_integral,
    box_mask,
    derivative_decomposition,
    discrete_alberti,
    energy,
    field_from_json,
    field_to_json,
    jumps,
    l1_distance,
    make_field,
    moment_family,
    moment_pairing,
    piecewise_constant_approx,
    prolong,
    TestFunction,
)

W1, PSI1 = get_density("quadratic", 1, 1), get_density("norm-jump", 1, 1)
W2, PSI2 = get_density("quadratic", 2, 2), get_density("norm-jump", 2, 2)


def unit_interval(n):
    return CubeGrid(1, 1, n, center=(0.5,))


def staircase(n=4):
    g = unit_interval(n)
    return make_field(g, values=np.floor(n * g.centers) / n, gradients=np.zeros((n, 1, 1)))


def midline_field(n=4):
    g = CubeGrid(2, 2, n, center=(0.5, 0.5))
    vals = np.where(g.centers[:, :1] > 0.5, [1.0, 0.0], [0.0, 0.0])
    return make_field(g, values=vals, gradients=np.zeros((g.ncells, 2, 2)))


def random_field(rng, N, d, n):
    g = CubeGrid(N, d, n, center=tuple(rng.normal(size=N)), side=float(rng.uniform(0.5, 2)))
    return make_field(g, values=rng.normal(size=(g.ncells, d)),
                      gradients=rng.normal(size=(g.ncells, d, N)))


fields = st.tuples(
    st.integers(0, 2**32 - 1), st.sampled_from([1, 2]), st.integers(1, 2), st.integers(1, 6)
).map(lambda t: random_field(np.random.default_rng(t[0]), t[1], t[2], t[3]))


# construction and jumps

def test_affine_data_gives_no_jumps():
    g = CubeGrid(1, 1, 2, center=(0.0,))
    assert jumps(make_field(g, [(-0.25, 1), (0.25, 1)])) == []


def test_piecewise_constant_single_jump():
    g = CubeGrid(1, 1, 2, center=(0.0,))
    (j,) = jumps(make_field(g, [(0, 0), (1, 0)]))
    assert j.jump[0] == 1.0 and j.normal[0] == 1.0 and j.midpoint[0] == 0.0


def test_wrong_count():
    with pytest.raises(ValueError, match="expected 2"):
        make_field(CubeGrid(1, 1, 2), [(0, 0)])


def test_non_finite_rejected():
    with pytest.raises(ValueError, match="finite"):
        make_field(CubeGrid(1, 1, 2), [(0, np.inf), (0, 0)])


def test_fields_are_immutable():
    f = staircase()
    with pytest.raises(ValueError):
        f.values[0, 0] = 3.0


def test_staircase_jumps():
    js = jumps(staircase())
    assert len(js) == 3
    assert all(j.jump[0] == pytest.approx(0.25) for j in js)


def test_midline_jumps():
    js = jumps(midline_field(4))
    assert len(js) == 4
    for j in js:
        np.testing.assert_array_equal(j.jump, [1.0, 0.0])
        np.testing.assert_array_equal(j.normal, [1.0, 0.0])


def test_affine_field_has_no_jumps():
    f = affine_field(CubeGrid(2, 2, 5), np.array([[1.0, 2.0], [3.0, -1.0]]))
    assert jumps(f) == []


# energy

def test_energy_affine():
    f = affine_field(CubeGrid(1, 1, 8, center=(0.0,)), 1.0)
    assert energy(f, W1, PSI1) == pytest.approx(1.0)


def test_energy_staircase():
    assert energy(staircase(), W1, PSI1) == pytest.approx(0.75)


def test_energy_midline():
    assert energy(midline_field(6), W2, PSI2) == pytest.approx(1.0)


def test_energy_dimension_mismatch():
    with pytest.raises(ValueError):
        energy(staircase(), W2, PSI2)


@settings(max_examples=60, deadline=None)
@given(fields, st.integers(0, 10))
def test_energy_additive_over_box_partition(f, cut):
    g = f.grid
    k = cut % g.n
    lo, hi = [0] * g.N, [g.n] * g.N
    mid = list(hi)
    mid[0] = k
    left = box_mask(g, lo, mid)
    right = ~left
    W, psi = get_density("quadratic", g.N, g.d), get_density("norm-jump", g.N, g.d)
    whole = energy(f, W, psi)
    parts = energy(f, W, psi, region=left) + energy(f, W, psi, region=right, closed=True)
    assert parts == pytest.approx(whole, rel=1e-12, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(fields)
def test_energy_nonnegative(f):
    W, psi = get_density("quadratic", f.grid.N, f.grid.d), get_density("norm-jump", f.grid.N, f.grid.d)
    assert energy(f, W, psi) >= 0


def test_flipping_orientation_flips_jump():
    g = CubeGrid(1, 1, 2, center=(0.0,))
    f = make_field(g, [(0, 0), (1, 0)])
    mirrored = make_field(g, [(1, 0), (0, 0)])
    assert jumps(f)[0].jump[0] == -jumps(mirrored)[0].jump[0]
    assert energy(f, W1, PSI1) == energy(mirrored, W1, PSI1)


def test_rotated_cube_jump_energy():
    nu = np.array([1.0, 1.0]) / np.sqrt(2)
    g = CubeGrid(2, 1, 8, center=(0.0, 0.0), nu=tuple(nu))
    vals = (g.centers @ nu > 0).astype(float)[:, None]
    f = make_field(g, values=vals, gradients=np.zeros((g.ncells, 1, 2)))
    W, psi = get_density("quadratic", 2, 1), get_density("norm-jump", 2, 1)
    assert energy(f, W, psi) == pytest.approx(1.0)
    for j in jumps(f):
        np.testing.assert_allclose(j.normal, nu)


def test_energy_model_matches_energy():
    f = midline_field(4)
    model = EnergyModel(f.grid, W2, PSI2)
    assert model.of(f) == pytest.approx(energy(f, W2, PSI2))


# derivative decomposition

@settings(max_examples=80, deadline=None)
@given(fields, st.data())
def test_gauss_identity(f, data):
    g = f.grid
    lo = [data.draw(st.integers(0, g.n - 1)) for _ in range(g.N)]
    hi = [data.draw(st.integers(l + 1, g.n)) for l in lo]
    bulk, jump = derivative_decomposition(f, lo, hi)
    np.testing.assert_allclose(bulk + jump, boundary_trace_integral(f, lo, hi), atol=1e-10)


# piecewise-constant approximation

def minus_x(n=64):
    return affine_field(unit_interval(n), -1.0, a=-0.5, x0=(0.5,))


def test_piecewise_constant_values():
    pc = piecewise_constant_approx(minus_x(4), 4)
    np.testing.assert_allclose(pc.values.ravel(), [-1 / 8, -3 / 8, -5 / 8, -7 / 8])
    assert not pc.gradients.any()


def test_piecewise_constant_of_constant():
    f = affine_field(unit_interval(8), 0.0, a=3.0)
    pc = piecewise_constant_approx(f, 4)
    assert l1_distance(prolong(pc, 1), f) == 0.0


@pytest.mark.parametrize("m,expected", [(4, 1 / 16), (8, 1 / 32), (16, 1 / 64)])
def test_piecewise_constant_error(m, expected):
    f = minus_x(64)
    pc = piecewise_constant_approx(f, m)
    assert l1_distance(pc, f) == pytest.approx(expected, abs=1e-14)
    # quadrature oracle on 10^4 points
    xs = (np.arange(10_000) + 0.5) / 10_000
    approx = -(np.floor(xs * m) + 0.5) / m
    assert np.mean(np.abs(approx + xs)) == pytest.approx(expected, rel=1e-3)


def test_piecewise_constant_incompatible():
    with pytest.raises(ValueError):
        piecewise_constant_approx(minus_x(8), 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2]))
def test_piecewise_constant_error_halves(seed, N):
    rng = np.random.default_rng(seed)
    n = 64 if N == 1 else 32
    g = CubeGrid(N, 1, n)
    A = rng.normal(size=(1, N))
    if np.abs(A).max() < 1e-3:
        return
    f = affine_field(g, A)
    e1 = l1_distance(piecewise_constant_approx(f, 4), f)
    e2 = l1_distance(piecewise_constant_approx(f, 8), f)
    assert e2 / e1 == pytest.approx(0.5, rel=0.05)


@settings(max_examples=40, deadline=None)
@given(fields)
def test_piecewise_constant_error_bound(f):
    g = f.grid
    pc = piecewise_constant_approx(f, g.n)
    gmax = np.abs(f.physical_gradients).sum(axis=(1, 2)).max()
    assert l1_distance(pc, f) <= g.side / g.n * gmax * g.volume + 1e-12


# Alberti primitive

def test_alberti_zero_target():
    f = discrete_alberti(CubeGrid(2, 2, 4), 0.0)
    assert jumps(f) == [] and not f.values.any()


def test_alberti_unit_slope():
    g = unit_interval(4)
    f = discrete_alberti(g, 1.0)
    js = jumps(f)
    assert [j.jump[0] for j in js] == [-0.25] * 3
    assert sum(abs(j.jump[0]) * j.area for j in js) == pytest.approx(0.75)
    assert sum(abs(j.jump[0]) for j in js) <= alberti_constants(g)["jump"] * 1.0


def test_alberti_constant_matrix_2d():
    g = CubeGrid(2, 2, 4)
    A = np.array([[1.0, 2.0], [0.5, -1.0]])
    f = discrete_alberti(g, A)
    js = jumps(f)
    # zero offsets: the jump across an axis-k facet is -A e_k h
    for j in js:
        axis = j.facet[0]
        np.testing.assert_allclose(j.jump, -A[:, axis] * g.h)
    assert len(js) == 2 * g.n * (g.n - 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2]), st.integers(1, 3), st.integers(1, 6))
def test_alberti_gradient_exact(seed, N, d, n):
    rng = np.random.default_rng(seed)
    g = CubeGrid(N, d, n)
    target = rng.normal(size=(g.ncells, d, N)) * 10
    f = discrete_alberti(g, target)
    assert np.array_equal(f.gradients, target)
    tv = sum(np.linalg.norm(j.jump) * j.area for j in jumps(f))
    mass = np.linalg.norm(target, axis=(1, 2)).sum() * g.cell_volume
    assert tv <= alberti_constants(g)["jump"] * mass + 1e-9


# L1 distance

def test_l1_self():
    assert l1_distance(staircase(), staircase()) == 0.0


def test_l1_affine_vs_staircase():
    g = unit_interval(4)
    d = l1_distance(affine_field(g, 1.0, a=0.5, x0=(0.5,)), staircase())
    assert d == pytest.approx(1 / 8, abs=1e-15)
    oracle, _ = integrate.quad(lambda x: x - np.floor(4 * x) / 4, 0, 1, points=[0.25, 0.5, 0.75])
    assert d == pytest.approx(oracle, abs=1e-12)


def test_l1_constants():
    g = CubeGrid(2, 1, 3, center=(0.5, 0.5))
    zero = affine_field(g, np.zeros((1, 2)))
    one = affine_field(g, np.zeros((1, 2)), a=1.0)
    assert l1_distance(zero, one) == pytest.approx(1.0)


def test_l1_grid_mismatch():
    with pytest.raises(ValueError):
        l1_distance(staircase(4), staircase(8))


def test_l1_2d_against_quadrature(rng):
    f1 = random_field(rng, 2, 1, 3)
    f2 = make_field(f1.grid, values=rng.normal(size=(9, 1)), gradients=rng.normal(size=(9, 1, 2)))
    c, s = np.asarray(f1.grid.center), f1.grid.side
    k = 600
    t = (np.arange(k) + 0.5) / k - 0.5
    X, Y = np.meshgrid(c[0] + s * t, c[1] + s * t, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=-1)
    oracle = np.mean(np.abs(f1(pts) - f2(pts))) * s**2
    assert l1_distance(f1, f2) == pytest.approx(oracle, rel=1e-3)


# moment pairing

def test_moment_constant_field():
    g = CubeGrid(2, 2, 4, side=2.0)
    B = np.array([[1.0, 2.0], [3.0, 4.0]])
    M = np.broadcast_to(B, (g.ncells, 2, 2))
    np.testing.assert_allclose(moment_pairing(g, M, TestFunction("monomial", (0, 0))), B * 4.0)


def test_moment_of_zero_gradient():
    f = staircase()
    for t in moment_family(1):
        assert not np.any(moment_pairing(f.grid, f.gradients, t))


def test_moment_odd_symmetry():
    g = CubeGrid(2, 2, 4, center=(0.0, 0.0))
    M = g.centers[:, 0, None, None] * np.eye(2)
    np.testing.assert_allclose(moment_pairing(g, M, TestFunction("monomial", (0, 0))), 0, atol=1e-15)


def test_moment_box_out_of_range():
    with pytest.raises(ValueError):
        moment_pairing(CubeGrid(1, 1, 2), np.zeros((2, 1, 1)), TestFunction("box", (), 1, (2,)))


def test_moment_box_indicator():
    g = CubeGrid(1, 1, 8, center=(0.5,))
    M = g.centers[:, :, None]  # F(x) = x
    val = moment_pairing(g, M, TestFunction("box", (), 1, (1,)))
    # cell-constant x on the right half: sum of centers times h
    assert val[0, 0] == pytest.approx(np.sum(g.centers[4:, 0]) / 8)


def test_moment_family_size():
    assert len(moment_family(1)) == 3 + 1 + 2 + 4
    assert len(moment_family(2)) == 6 + 1 + 4 + 16


def test_moment_unsupported():
    with pytest.raises(ValueError):
        moment_pairing(CubeGrid(1, 1, 2), np.zeros((2, 1, 1)), TestFunction("monomial", (4,)))


# serialization

@settings(max_examples=40, deadline=None)
@given(fields)
def test_json_round_trip(f):
    text = field_to_json(f)
    back = field_from_json(text)
    assert np.array_equal(back.values, f.values)
    assert np.array_equal(back.gradients, f.gradients)
    assert field_to_json(back) == text

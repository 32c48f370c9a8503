import numpy as np
import pytest

from sdrelax.approx import MultiLevelDeformation
from sdrelax.catalog import get_density
from sdrelax.cell import jump_datum
from sdrelax.multilevel import (
    RelaxationEstimate,
    compare,
    problem_id,
    relax_direct,
    relax_iterated,
    tabulate_first_stage,
)
from sdrelax.sbv import CubeGrid, affine_field

W, PSI = get_density("quadratic"), get_density("norm-jump")
GRID = CubeGrid(1, 1, 16, center=(0.5,))


def identity():
    return affine_field(GRID, 1.0, a=0.5, x0=(0.5,))


def desk_suite():
    return {
        "affine": MultiLevelDeformation(affine_field(GRID, 1.5), 1.5, 1.5, 2),
        "x00": MultiLevelDeformation(identity(), 0.0, 0.0, 2),
        "jump": MultiLevelDeformation(jump_datum(GRID, [0.7]), 0.0, 0.0, 2),
    }


@pytest.fixture(scope="module")
def estimates():
    return {k: (relax_direct(ml, W, PSI), relax_iterated(ml, W, PSI)) for k, ml in desk_suite().items()}


def test_affine_exact(estimates):
    for est in estimates["affine"]:
        assert est.value == pytest.approx(2.25, abs=1e-9)
        assert est.lower == pytest.approx(2.25, abs=1e-9)
        assert est.upper == pytest.approx(2.25, abs=1e-9)


def test_x00_bracket_contains_cell_value(estimates):
    for est in estimates["x00"]:
        assert est.lower <= 1.0 + 1e-12
        assert est.upper >= 1.0 - 1e-12
    assert estimates["x00"][0].upper <= 1.0 + 0.05


def test_jump_case_reproduces_surface_density(estimates):
    for est in estimates["jump"]:
        assert est.value == pytest.approx(0.7, abs=5e-2)


@pytest.mark.parametrize("case", ["affine", "x00", "jump"])
def test_desk_suite_compare(estimates, case):
    assert compare(*estimates[case], tol=5e-2).passed


def test_zero_deformation():
    ml = MultiLevelDeformation(affine_field(GRID, 0.0), 0.0, 0.0, 2)
    assert relax_direct(ml, W, PSI).value == 0.0
    assert relax_iterated(ml, W, PSI).value == 0.0


def test_three_level_example_both_equal_seven():
    ml = MultiLevelDeformation(identity(), 0.0, 2.0, 2)
    d, i = relax_direct(ml, W, PSI), relax_iterated(ml, W, PSI)
    # W(G2) + |Dg - G2| = 4 + 1 + 2
    assert d.value == pytest.approx(7.0, abs=1e-6)
    assert i.value == pytest.approx(7.0, abs=1e-9)
    assert compare(d, i, 5e-2).passed


def test_brackets_are_ordered(estimates):
    for pair in estimates.values():
        for est in pair:
            assert est.lower <= est.value <= est.upper


def test_estimates_reproducible():
    ml = desk_suite()["x00"]
    a, b = relax_direct(ml, W, PSI, seed=3), relax_direct(ml, W, PSI, seed=3)
    assert (a.lower, a.value, a.upper) == (b.lower, b.value, b.upper)


def test_iterated_reports_table_checks():
    est = relax_iterated(desk_suite()["jump"], W, PSI)
    assert est.details["table_convex"]
    assert est.details["tabulated_surface_verdicts"]["psi4"] == "pass"


def test_first_stage_table_matches_closed_form():
    table = tabulate_first_stage(W, PSI, 2, radius=2.0, spacing=0.5)
    for A in (-1.0, 0.0, 1.5):
        for B in (-0.5, 1.0):
            assert table.bulk(A, B) == pytest.approx(B * B + abs(A - B), abs=1e-9)
    assert table.surface(1.5) == pytest.approx(1.5, abs=1e-9)


def test_invalid_bracket_rejected():
    with pytest.raises(ValueError):
        RelaxationEstimate(1.0, 1.5, 2.0, "direct", 0, 1, "p")


def _est(lo, hi, problem="p"):
    return RelaxationEstimate((lo + hi) / 2, lo, hi, "direct", 0, 1, problem)


def test_compare_identical():
    assert compare(_est(1.0, 1.1), _est(1.0, 1.1)).passed


def test_compare_overlap():
    c = compare(_est(1.0, 1.02), _est(1.01, 1.05), tol=0.0)
    assert c.passed and c.gap == 0.0


def test_compare_disjoint():
    c = compare(_est(1.0, 1.02), _est(1.5, 1.6), tol=0.1)
    assert not c.passed
    assert c.gap == pytest.approx(0.48)


def test_compare_mismatched_problems():
    with pytest.raises(ValueError):
        compare(_est(1.0, 1.1, "a"), _est(1.0, 1.1, "b"))


def test_problem_id_distinguishes_data():
    suite = desk_suite()
    assert problem_id(suite["x00"], W, PSI) != problem_id(suite["jump"], W, PSI)
    assert problem_id(suite["x00"], W, PSI) == problem_id(desk_suite()["x00"], W, PSI)


def test_iterated_is_one_dimensional():
    g = CubeGrid(2, 1, 4)
    A = np.array([[1.0, 0.0]])
    ml = MultiLevelDeformation(affine_field(g, A), A, A, 2)
    W2, P2 = get_density("quadratic", 2, 1), get_density("norm-jump", 2, 1)
    with pytest.raises(NotImplementedError):
        relax_iterated(ml, W2, P2)
    assert relax_direct(ml, W2, P2).value == pytest.approx(1.0, abs=1e-12)

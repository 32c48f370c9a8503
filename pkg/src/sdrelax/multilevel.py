"""Direct and iterated estimates of the three-level relaxed energy.

Direct: energies of explicit admissible double-indexed families, with the
iterated limit (inner index first) extrapolated along the ladder.

Iterated: first-stage densities ``H_p(A, B)`` and ``h_p(lam)`` tabulated by
cell solves and interpolated multilinearly; the second stage relaxes the
resulting energy with an auxiliary field ``U``:

    H2(A, B1, B2) = inf { int H_p(grad u, U) + sum h_p([u]) :
                          u = Ax near the boundary, mean grad u = B1, mean U = B2 }

and the total is ``sum_cells H2(grad g, G1, G2) |cell| + sum_jumps h2([g]) |facet|``.
Tabulation is implemented for scalar problems (``N = d = 1``).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .approx import (
    DoubleFamily,
    MultiLevelDeformation,
    constant_family,
    multilevel_family,
    verify_hsd_convergence,
)
from .cell import CellProblemSpec, solve_bulk_cell, solve_surface_cell
from .densities import BulkDensity, SurfaceDensity, frobenius
from .sbv import CubeGrid, EnergyModel, affine_field, box_mask, field_to_json, jumps, make_field
from .solver import MaskedProblem, SolverBudget, solve_masked
from .validate import validate_surface

__all__ = [
    "RelaxationEstimate",
    "Comparison",
    "relax_direct",
    "relax_iterated",
    "compare",
    "problem_id",
    "FirstStageTable",
    "tabulate_first_stage",
]


@dataclass
class RelaxationEstimate:
    value: float
    lower: float
    upper: float
    method: str
    seed: int
    budget_used: int
    problem: str
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.lower <= self.value <= self.upper):
            raise ValueError(f"inconsistent bracket {self.lower} <= {self.value} <= {self.upper}")

    def to_dict(self) -> dict:
        return {"value": self.value, "lower": self.lower, "upper": self.upper,
                "method": self.method, "seed": self.seed, "budget_used": self.budget_used,
                "problem": self.problem, "details": _plain(self.details)}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def problem_id(ml: MultiLevelDeformation, W: BulkDensity, psi: SurfaceDensity) -> str:
    """Hash identifying the deformation and the densities."""
    payload = json.dumps({
        "g": field_to_json(ml.g),
        "G1": ml.G1.ravel().tolist(),
        "G2": ml.G2.ravel().tolist(),
        "p": ml.p,
        "W": [W.name, W.source],
        "psi": [psi.name, psi.source],
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _total_variation(ml: MultiLevelDeformation) -> float:
    """``|Dg|(Omega)`` of the discrete field."""
    g = ml.g
    grid = g.grid
    bulk = float(np.sum(frobenius(g.gradients)) * grid.cell_volume)
    return bulk + sum(float(np.linalg.norm(j.jump)) * j.area for j in jumps(g))


def _lower_bound(ml: MultiLevelDeformation, W: BulkDensity, psi: SurfaceDensity) -> tuple[float, str]:
    """Largest available lower bound on the relaxed energy.

    Always: the growth bound ``k(|Dg| - vol) + (c_W/2) ||G2||_p^p - vol/c_W``
    with ``k = min(c_W/2, c_psi)``.  For convex ``W`` and ``psi = c|lam|``:
    ``int W(x, G2) + c |Dg - G2 dx|(Omega)``, by lower semicontinuity of that
    convex functional along the iterated limits.
    """
    grid = ml.grid
    vol = grid.volume
    k = min(W.coercivity_const / 2, psi.lower_const)
    G2n = frobenius(ml.G2)
    growth = k * (_total_variation(ml) - vol) + (W.coercivity_const / 2) * float(
        np.sum(G2n ** ml.p) * grid.cell_volume) - vol / W.coercivity_const
    best, how = max(growth, 0.0), "growth"
    if W.convex and psi.jump_scale is not None:
        g = ml.g
        bulk = float(np.sum(W(grid.centers, ml.G2)) * grid.cell_volume)
        diff = frobenius(g.physical_gradients - ml.G2)
        tv = float(np.sum(diff) * grid.cell_volume) + sum(
            float(np.linalg.norm(j.jump)) * j.area for j in jumps(g))
        convex = bulk + psi.jump_scale * tv
        if convex > best:
            best, how = convex, "convex"
    return best, how


def _richardson(values: Sequence[float]) -> tuple[float, float]:
    """Limit estimate assuming first-order decay on a doubling ladder, and the
    size of the last step."""
    if len(values) < 2:
        return float(values[-1]), 0.0
    a, b = float(values[-2]), float(values[-1])
    return 2.0 * b - a, abs(b - a)


INNER_MULTIPLIERS = (4, 8, 16)


def _family_energy(family: DoubleFamily, ladder, W, psi) -> dict:
    """Energies ``E(u_{n1, k n1})``; the inner limit is extrapolated in ``k``
    for each ``n1``, then the outer limit in ``n1``."""
    table = {}
    inner = []
    inner_step = 0.0
    for n1 in ladder:
        seq = []
        for k in INNER_MULTIPLIERS:
            u = family(n1, k * n1)
            table[(n1, k * n1)] = EnergyModel(u.grid, W, psi).of(u)
            seq.append(table[(n1, k * n1)])
        lim, step = _richardson(seq)
        inner.append(lim)
        inner_step = max(inner_step, step)
    outer, outer_step = _richardson(inner)
    return {"table": table, "inner": inner, "limit": outer, "margin": outer_step + inner_step}


def relax_direct(ml: MultiLevelDeformation, W: BulkDensity, psi: SurfaceDensity,
                 budget: int = 2, ladder: Sequence[int] = (4, 8, 16, 32), seed: int = 0,
                 families: Sequence[DoubleFamily] = ()) -> RelaxationEstimate:
    """Upper bracket from admissible families, lower bracket from bounds.

    The library holds the multi-level construction and, when ``G1 = G2 =
    grad g``, the constant family; user ``families`` are appended.  A family
    counts only if it passes :func:`verify_hsd_convergence`.  ``budget`` caps
    the number of families examined.
    """
    if budget < 1:
        raise ValueError("budget must allow at least one candidate family")
    ladder = [int(n) for n in ladder]
    library = [multilevel_family(ml)]
    grad = ml.g.physical_gradients
    if np.allclose(ml.G1, grad, atol=0, rtol=0) and np.allclose(ml.G2, grad, atol=0, rtol=0):
        library.insert(0, constant_family(ml.g))
    library.extend(families)
    examined = []
    best = None
    for fam in library[:budget]:
        report = verify_hsd_convergence(fam, ml, ladder)
        entry = {"family": fam.label, "verdicts": report.verdicts}
        if report.passed():
            res = _family_energy(fam, ladder, W, psi)
            entry.update(limit=res["limit"], margin=res["margin"], inner=res["inner"])
            upper = res["limit"] + res["margin"]
            if best is None or upper < best[1]:
                best = (res["limit"], upper, fam.label)
        examined.append(entry)
    lower, how = _lower_bound(ml, W, psi)
    pid = problem_id(ml, W, psi)
    if best is None:
        up = math.inf
        return RelaxationEstimate(lower, lower, up, "direct", seed, len(examined), pid,
                                  {"families": examined, "lower_bound": how,
                                   "note": "no admissible family passed verification"})
    value, upper, label = best
    upper = max(upper, lower)
    value = min(max(value, lower), upper)
    return RelaxationEstimate(value, lower, upper, "direct", seed, len(examined), pid,
                              {"families": examined, "best_family": label, "lower_bound": how})


# ----------------------------------------------------------- first stage

@dataclass
class FirstStageTable:
    """Tabulated ``H_p`` on an ``(A, B)`` lattice and ``h_p`` on a ``lam`` lattice."""

    A_nodes: np.ndarray
    B_nodes: np.ndarray
    H: np.ndarray
    lam_nodes: np.ndarray
    h: np.ndarray
    spacing: float
    convex_nodes: bool
    solves: int

    def __post_init__(self):
        self._H = RegularGridInterpolator((self.A_nodes, self.B_nodes), self.H,
                                          bounds_error=False, fill_value=None)
        self._h = RegularGridInterpolator((self.lam_nodes,), self.h,
                                          bounds_error=False, fill_value=None)

    def bulk(self, A, B):
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        shape = np.broadcast_shapes(A.shape, B.shape)
        pts = np.stack([np.broadcast_to(A, shape).ravel(), np.broadcast_to(B, shape).ravel()], axis=-1)
        return self._H(pts).reshape(shape)

    def surface(self, lam):
        lam = np.asarray(lam, dtype=float)
        return self._h(lam.reshape(-1, 1)).reshape(lam.shape)

    def on_nodes(self, values, nodes) -> bool:
        v = np.ravel(values)
        k = np.round((v - nodes[0]) / self.spacing)
        inside = (k >= 0) & (k < len(nodes))
        return bool(np.all(inside) and np.all(np.abs(nodes[0] + k * self.spacing - v) < 1e-12))

    def interpolation_error(self) -> tuple[float, float]:
        """Per-unit error estimates ``max|second difference| / 8`` summed over axes
        (bulk table, surface table)."""
        eb = sum(float(np.max(np.abs(np.diff(self.H, 2, axis=ax)), initial=0.0)) / 8 for ax in (0, 1))
        es = float(np.max(np.abs(np.diff(self.h, 2)), initial=0.0)) / 8
        return eb, es


def tabulate_first_stage(W: BulkDensity, psi: SurfaceDensity, p: float, radius: float,
                         spacing: float = 0.25, n: int = 8, budget: SolverBudget = SolverBudget(),
                         seed: int = 0) -> FirstStageTable:
    """Solve the first-stage cell problems on a lattice centred at 0."""
    if W.N != 1 or W.d != 1:
        raise NotImplementedError("first-stage tabulation is implemented for N = d = 1")
    if spacing <= 0 or radius <= 0:
        raise ValueError("spacing and radius must be positive")
    k = int(math.ceil(radius / spacing))
    nodes = spacing * np.arange(-k, k + 1)
    H = np.empty((len(nodes), len(nodes)))
    solves = 0
    for i, A in enumerate(nodes):
        for j, B in enumerate(nodes):
            spec = CellProblemSpec("bulk", W, psi, p=p, A=A, B=[B], n=n, budget=budget, seed=seed)
            H[i, j] = solve_bulk_cell(spec).value
            solves += 1
    lam_nodes = spacing * np.arange(-2 * k, 2 * k + 1)
    h = np.empty(len(lam_nodes))
    for i, lam in enumerate(lam_nodes):
        spec = CellProblemSpec("surface", W, psi, p=p, lam=[lam], n=n, budget=budget, seed=seed)
        h[i] = solve_surface_cell(spec).value
        solves += 1
    tol = 1e-9 * (1 + np.max(np.abs(H)))
    convex = bool(np.all(np.diff(H, 2, axis=0) >= -tol) and np.all(np.diff(H, 2, axis=1) >= -tol)
                  and np.all(np.diff(h, 2) >= -tol))
    return FirstStageTable(nodes, nodes, H, lam_nodes, h, spacing, convex, solves)


def _table_surface_density(table: FirstStageTable, psi: SurfaceDensity) -> SurfaceDensity:
    lam_abs = np.abs(table.lam_nodes)
    ratio = table.h[lam_abs > 0] / lam_abs[lam_abs > 0]
    return SurfaceDensity(
        lambda x, lam, nu: table.surface(np.asarray(lam)[..., 0]),
        N=1, d=1, lower_const=max(float(ratio.min()), 1e-12), upper_const=float(ratio.max()),
        homogeneous=True, name="tabulated h_p",
    )


def _second_stage_bulk(table: FirstStageTable, A, B1, B2, exact: bool, n: int,
                       budget: SolverBudget, seed: int) -> tuple[float, bool]:
    """``H2(A, B1, B2)`` on the unit cell; returns ``(value, exact_path)``."""
    if exact:
        return float(table.bulk(B1, B2)) + float(table.surface(A - B1)), True
    grid = CubeGrid(1, 1, n + 2, side=(n + 2) / n)
    region = box_mask(grid, (1,), (n + 1,))
    datum = affine_field(grid, A)

    def bulk(x, G, U):
        return table.bulk(G[..., 0, 0], U[..., 0, 0])

    def surface(x, lam, axis):
        return table.surface(lam[..., 0])

    problem = MaskedProblem(grid, datum, region, bulk, surface,
                            grad_mean=np.array([[B1]]), extra_means=(np.array([[B2]]),))
    return solve_masked(problem, budget, seed).value, False


def _second_stage_surface(table: FirstStageTable, lam, exact: bool, n: int,
                          budget: SolverBudget, seed: int) -> tuple[float, bool]:
    if exact:
        return float(table.surface(lam)), True
    grid = CubeGrid(1, 1, n + 2, side=(n + 2) / n)
    region = box_mask(grid, (1,), (n + 1,))
    vals = np.where(grid.canonical_centers[:, 0] > 0, lam, 0.0)
    datum = make_field(grid, values=vals)

    def bulk(x, G):
        return table.bulk(G[..., 0, 0], np.zeros_like(G[..., 0, 0]))

    def surface(x, j, axis):
        return table.surface(j[..., 0])

    problem = MaskedProblem(grid, datum, region, bulk, surface, zero_gradient=True)
    return solve_masked(problem, budget, seed).value, False


def relax_iterated(ml: MultiLevelDeformation, W: BulkDensity, psi: SurfaceDensity,
                   spacing: float = 0.25, radius: Optional[float] = None, n: int = 8,
                   budget: SolverBudget = SolverBudget(), seed: int = 0,
                   table: Optional[FirstStageTable] = None) -> RelaxationEstimate:
    """Iterated estimate with bracket ``value -/+ (interpolation + solver error)``.

    The second stage uses the closed form ``H_p(B1, B2) + h_p(A - B1)``
    (Jensen plus subadditivity) when ``N = 1``, ``W`` is convex, ``psi`` is
    subadditive and the tabulated ``H_p`` is convex at the nodes; otherwise
    it solves the second-stage cell problem numerically.
    """
    grid = ml.grid
    if grid.N != 1 or grid.d != 1:
        raise NotImplementedError("the iterated estimator is implemented for N = d = 1")
    gA = ml.g.physical_gradients[:, 0, 0]
    G1 = ml.G1[:, 0, 0]
    G2 = ml.G2[:, 0, 0]
    jl = jumps(ml.g)
    jump_sizes = np.array([j.jump[0] for j in jl])
    if radius is None:
        radius = 1.0 + float(max(np.max(np.abs(gA)), np.max(np.abs(G1)), np.max(np.abs(G2)),
                                 np.max(np.abs(jump_sizes), initial=0.0) / 2))
    if table is None:
        table = tabulate_first_stage(W, psi, ml.p, radius, spacing, n, budget, seed)
    exact = bool(W.convex and psi.subadditive and table.convex_nodes)
    vsurf = validate_surface(_table_surface_density(table, psi), seed, n_samples=2000, tol=1e-6)

    cache_b, cache_s = {}, {}
    bulk_total = 0.0
    for A, B1, B2 in zip(gA, G1, G2):
        key = (round(A, 12), round(B1, 12), round(B2, 12))
        if key not in cache_b:
            cache_b[key] = _second_stage_bulk(table, A, B1, B2, exact, n, budget, seed)
        bulk_total += cache_b[key][0] * grid.cell_volume
    surf_total = 0.0
    for lam in jump_sizes:
        key = round(float(lam), 12)
        if key not in cache_s:
            cache_s[key] = _second_stage_surface(table, lam, exact, n, budget, seed)
        surf_total += cache_s[key][0] * grid.facet_area
    value = bulk_total + surf_total

    eb, es = table.interpolation_error()
    err = 0.0
    on_nodes = exact and table.on_nodes(np.concatenate([G1, G2]), table.A_nodes) \
        and table.on_nodes(gA - G1, table.lam_nodes) and table.on_nodes(jump_sizes, table.lam_nodes)
    if not on_nodes:
        err += eb * grid.volume + es * (grid.volume + len(jump_sizes) * grid.facet_area)
    if not exact:
        err += 1e-6 * (1 + abs(value))
    details = {
        "spacing": spacing,
        "radius": radius,
        "first_stage_solves": table.solves,
        "second_stage_exact": exact,
        "queries_on_nodes": on_nodes,
        "interpolation_error": [eb, es],
        "table_convex": table.convex_nodes,
        "tabulated_surface_verdicts": vsurf.verdicts,
        "bulk_queries": len(cache_b),
        "surface_queries": len(cache_s),
    }
    return RelaxationEstimate(value, value - err, value + err, "iterated", seed,
                              table.solves + len(cache_b) + len(cache_s),
                              problem_id(ml, W, psi), details)


# ------------------------------------------------------------- comparison

@dataclass
class Comparison:
    passed: bool
    gap: float
    brackets: tuple
    tol: float

    def to_dict(self) -> dict:
        return {"passed": self.passed, "gap": self.gap, "tol": self.tol,
                "brackets": [list(b) for b in self.brackets]}


def compare(e1: RelaxationEstimate, e2: RelaxationEstimate, tol: float = 0.0) -> Comparison:
    """Pass iff the brackets intersect after widening each side by ``tol``.

    ``gap`` is the distance between the brackets (0 when they overlap).
    """
    if e1.problem != e2.problem:
        raise ValueError(f"estimates refer to different problems ({e1.problem} vs {e2.problem})")
    gap = max(0.0, max(e1.lower, e2.lower) - min(e1.upper, e2.upper))
    return Comparison(gap <= 2 * tol, gap, ((e1.lower, e1.upper), (e2.lower, e2.upper)), tol)

"""Determining sequences for structured deformations and their verification.

Two-level: ``u_n = g + h - h_n`` with ``grad h = G - grad g`` (discrete
primitive anchored at block corners) and ``h_n`` its piecewise-constant
approximation on the ``n``-partition.  Three-level:
``u = g + (ubar_{n1} - u1) + (ubar_{n2} - u2)`` with
``grad u1 = grad g - G1`` and ``grad u2 = G1 - G2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .sbv import (
    CubeGrid,
    DiscreteSBVField,
    discrete_alberti,
    l1_distance,
    moment_family,
    moment_pairing,
    piecewise_constant_approx,
    prolong,
)

__all__ = [
    "StructuredDeformation",
    "MultiLevelDeformation",
    "DoubleFamily",
    "ConvergenceReport",
    "build_determining_sequence",
    "build_multilevel_sequence",
    "multilevel_family",
    "constant_family",
    "inner_limit",
    "verify_hsd_convergence",
    "on_common_grid",
]


def _matrix_field(G, grid: CubeGrid) -> np.ndarray:
    G = np.asarray(G, dtype=float)
    if G.size == grid.d * grid.N:
        G = np.broadcast_to(G.reshape(grid.d, grid.N), (grid.ncells, grid.d, grid.N))
    G = np.array(G, dtype=float).reshape(grid.ncells, grid.d, grid.N)
    if not np.all(np.isfinite(G)):
        raise ValueError("matrix field entries must be finite")
    G.setflags(write=False)
    return G


@dataclass(frozen=True, eq=False)
class StructuredDeformation:
    """``(g, G)`` with ``G`` a per-cell matrix field on the grid of ``g``
    (physical coordinates)."""

    g: DiscreteSBVField
    G: np.ndarray
    p: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "G", _matrix_field(self.G, self.g.grid))
        if self.p < 1:
            raise ValueError("p must be >= 1")


@dataclass(frozen=True, eq=False)
class MultiLevelDeformation:
    """``(g, G1, G2)``; ``mode`` is ``"HSD"`` (both in L^p) or ``"SD"``
    (``G1`` in L^1, ``G2`` in L^p)."""

    g: DiscreteSBVField
    G1: np.ndarray
    G2: np.ndarray
    p: float = 1.0
    mode: str = "HSD"

    def __post_init__(self):
        object.__setattr__(self, "G1", _matrix_field(self.G1, self.g.grid))
        object.__setattr__(self, "G2", _matrix_field(self.G2, self.g.grid))
        if self.mode not in ("HSD", "SD"):
            raise ValueError("mode must be 'HSD' or 'SD'")
        if self.p < 1:
            raise ValueError("p must be >= 1")

    @property
    def grid(self) -> CubeGrid:
        return self.g.grid


# ------------------------------------------------------------------ grids

def _refine_to(f: DiscreteSBVField, n: int) -> DiscreteSBVField:
    if n == f.grid.n:
        return f
    if n % f.grid.n:
        raise ValueError(f"cannot refine a grid of {f.grid.n} cells to {n}")
    return prolong(f, n // f.grid.n)


def _refine_matrix(G: np.ndarray, grid: CubeGrid, n: int) -> np.ndarray:
    if n == grid.n:
        return G
    zeros = np.zeros((grid.ncells, grid.d))
    return prolong(DiscreteSBVField(grid, zeros, G @ grid.rotation.T), n // grid.n).physical_gradients


def on_common_grid(*fields: DiscreteSBVField) -> list[DiscreteSBVField]:
    """Exact representations of the fields on their finest common refinement."""
    base = fields[0].grid
    for f in fields:
        if (f.grid.N, f.grid.d, f.grid.center, f.grid.side, f.grid.nu) != \
                (base.N, base.d, base.center, base.side, base.nu):
            raise ValueError("fields live on different cubes")
    n = math.lcm(*(f.grid.n for f in fields))
    return [_refine_to(f, n) for f in fields]


def _corner_primitive(target: np.ndarray, grid: CubeGrid, n: int) -> DiscreteSBVField:
    """Primitive of ``target`` whose piecewise-constant corner approximation
    on the ``n``-partition vanishes."""
    return discrete_alberti(grid, target, anchor="corner", block=grid.n // n)


# ------------------------------------------------------------ constructions

def build_determining_sequence(sd: StructuredDeformation, n: int) -> DiscreteSBVField:
    """``u_n = g + h - h_n``; the result lives on a grid refined to a
    multiple of ``n`` and satisfies ``grad u_n = G`` cell by cell."""
    if n < 1:
        raise ValueError("n must be >= 1")
    grid0 = sd.g.grid
    m = math.lcm(grid0.n, n)
    g = _refine_to(sd.g, m)
    G = _refine_matrix(sd.G, grid0, m)
    h = _corner_primitive(G - g.physical_gradients, g.grid, n)
    h_n = piecewise_constant_approx(h, n, rule="corner")
    u = g + h - h_n
    # bitwise gradient identity: store the target itself
    return u.replace(gradients=G @ g.grid.rotation.T)


@dataclass
class DoubleFamily:
    """Double-indexed family ``(n1, n2) -> u``.

    ``inner_limit(n1)`` is the L^1 limit as the inner index ``n2`` grows, when
    known in closed form; otherwise verification uses the member at the
    largest inner index.  ``swap`` exchanges the roles of the indices.
    """

    member: Callable[[int, int], DiscreteSBVField]
    inner_limit: Optional[Callable[[int], DiscreteSBVField]] = None
    outer_first_limit: Optional[Callable[[int], DiscreteSBVField]] = None
    label: str = ""

    def __call__(self, n1: int, n2: int) -> DiscreteSBVField:
        return self.member(n1, n2)

    def swapped(self) -> "DoubleFamily":
        return DoubleFamily(lambda a, b: self.member(b, a), self.outer_first_limit,
                            self.inner_limit, self.label + " (swapped)")


def _multilevel_parts(ml: MultiLevelDeformation, n1: int, n2: int):
    grid0 = ml.grid
    m = math.lcm(grid0.n, n1, n2)
    g = _refine_to(ml.g, m)
    G1 = _refine_matrix(ml.G1, grid0, m)
    G2 = _refine_matrix(ml.G2, grid0, m)
    u1 = _corner_primitive(g.physical_gradients - G1, g.grid, n1)
    u2 = _corner_primitive(G1 - G2, g.grid, n2)
    ubar1 = piecewise_constant_approx(u1, n1, rule="corner")
    ubar2 = piecewise_constant_approx(u2, n2, rule="corner")
    return g, G1, G2, u1, u2, ubar1, ubar2


def build_multilevel_sequence(ml: MultiLevelDeformation, n1: int, n2: int) -> DiscreteSBVField:
    """``g + (ubar_{n1} - u1) + (ubar_{n2} - u2)`` with ``grad = G2`` per cell."""
    if n1 < 1 or n2 < 1:
        raise ValueError("indices must be >= 1")
    g, _, G2, u1, u2, ubar1, ubar2 = _multilevel_parts(ml, n1, n2)
    u = g + (ubar1 - u1) + (ubar2 - u2)
    return u.replace(gradients=G2 @ g.grid.rotation.T)


def inner_limit(ml: MultiLevelDeformation, n1: int) -> DiscreteSBVField:
    """``g_{n1} = g + ubar_{n1} - u1``, with ``grad g_{n1} = G1`` per cell."""
    g, G1, _, u1, _, ubar1, _ = _multilevel_parts(ml, n1, n1)
    return (g + ubar1 - u1).replace(gradients=G1 @ g.grid.rotation.T)


def _outer_first_limit(ml: MultiLevelDeformation, n2: int) -> DiscreteSBVField:
    """Limit as ``n1`` grows with ``n2`` fixed: ``g + ubar_{n2} - u2``."""
    g, _, _, _, u2, _, ubar2 = _multilevel_parts(ml, n2, n2)
    return g + ubar2 - u2


def multilevel_family(ml: MultiLevelDeformation) -> DoubleFamily:
    return DoubleFamily(lambda a, b: build_multilevel_sequence(ml, a, b),
                        lambda a: inner_limit(ml, a),
                        lambda b: _outer_first_limit(ml, b),
                        "multilevel construction")


def constant_family(g: DiscreteSBVField) -> DoubleFamily:
    return DoubleFamily(lambda a, b: g, lambda a: g, lambda b: g, "constant")


# ------------------------------------------------------------ verification

@dataclass
class ConvergenceReport:
    ladder: list
    l1: dict = field(default_factory=dict)
    moments: dict = field(default_factory=dict)
    rates: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    sup_grad_norm: Optional[float] = None
    tolerances: dict = field(default_factory=dict)

    def passed(self) -> bool:
        return all(v == "pass" for v in self.verdicts.values())

    def to_dict(self) -> dict:
        return {
            "ladder": self.ladder,
            "l1": {k: list(map(float, v)) for k, v in self.l1.items()},
            "moments": {k: list(map(float, v)) for k, v in self.moments.items()},
            "rates": self.rates,
            "verdicts": self.verdicts,
            "sup_grad_norm": self.sup_grad_norm,
            "tolerances": self.tolerances,
        }


def _rate(ladder, values) -> Optional[float]:
    """Fitted exponent ``r`` in ``value ~ n**(-r)`` (None if not positive)."""
    v = np.asarray(values, dtype=float)
    if np.any(v <= 0):
        return None
    slope = np.polyfit(np.log(ladder), np.log(v), 1)[0]
    return float(-slope)


def _converges(values, tol, slack=1e-12) -> bool:
    """Non-increasing over the upper half of the ladder and final value <= tol."""
    v = list(values)
    k = max(2, (len(v) + 1) // 2)
    tail = v[-k:]
    monotone = all(b <= a + slack for a, b in zip(tail, tail[1:]))
    return bool(monotone and tail[-1] <= tol)


def _l1(f1, f2) -> float:
    a, b = on_common_grid(f1, f2)
    return l1_distance(a, b)


def _moment_gap(f: DiscreteSBVField, target: np.ndarray, target_grid: CubeGrid, family) -> float:
    """``max_phi |int (grad f - target) phi|`` (Frobenius norm)."""
    n = math.lcm(f.grid.n, target_grid.n)
    grid = f.grid if n == f.grid.n else f.grid.refined(n // f.grid.n)
    F = _refine_matrix(f.physical_gradients, f.grid, n)
    T = _refine_matrix(target, target_grid, n)
    return max(float(np.linalg.norm(moment_pairing(grid, F - T, phi))) for phi in family)


def verify_hsd_convergence(family: DoubleFamily, target: MultiLevelDeformation,
                           ladder: Sequence[int] = (2, 4, 8, 16), l1_tol: float = 0.1,
                           moment_tol: float = 0.1) -> ConvergenceReport:
    """Check the three clauses of multi-level convergence on a finite ladder.

    The inner index is ``n2``: for each ``n1`` its limit is taken first.

    (i)   ``||lim_{n2} u_{n1,n2} - g||_1`` decreases below ``l1_tol``;
    (ii)  ``||u_{n1,n2} - g_{n1}||_1`` decreases in ``n2`` for every ``n1`` and
          the moments of ``grad g_{n1} - G1`` decrease below ``moment_tol``;
    (iii) the moments of ``lim_{n2} grad u_{n1,n2} - G2`` decrease below
          ``moment_tol``.

    Moments use the fixed family of :func:`sdrelax.sbv.moment_family`.  In
    SD mode with ``p > 1`` the report also carries ``sup ||grad u||_p``.
    """
    ladder = [int(n) for n in ladder]
    if len(ladder) < 3:
        raise ValueError("index ladder needs at least 3 entries")
    g, grid = target.g, target.grid
    tests = moment_family(grid.N)
    top = ladder[-1]

    def inner(n1):
        if family.inner_limit is not None:
            return family.inner_limit(n1)
        return family(n1, top)

    limits = [inner(n1) for n1 in ladder]
    rep = ConvergenceReport(ladder, tolerances={"l1": l1_tol, "moment": moment_tol})
    rep.l1["(i)"] = [_l1(gn, g) for gn in limits]
    inner_ok = True
    for n1 in ladder:
        seq = [_l1(family(n1, n2), limits[ladder.index(n1)]) for n2 in ladder]
        rep.l1[f"(ii) n1={n1}"] = seq
        inner_ok &= _converges(seq, l1_tol)
    rep.moments["(ii)"] = [_moment_gap(gn, target.G1, grid, tests) for gn in limits]
    grad_limits = [family(n1, top) for n1 in ladder]
    rep.moments["(iii)"] = [_moment_gap(u, target.G2, grid, tests) for u in grad_limits]
    rep.verdicts["(i)"] = "pass" if _converges(rep.l1["(i)"], l1_tol) else "fail"
    rep.verdicts["(ii)"] = "pass" if inner_ok and _converges(rep.moments["(ii)"], moment_tol) else "fail"
    rep.verdicts["(iii)"] = "pass" if _converges(rep.moments["(iii)"], moment_tol) else "fail"
    for key, vals in list(rep.l1.items()) + [(f"moment {k}", v) for k, v in rep.moments.items()]:
        rep.rates[key] = _rate(ladder, vals)
    if target.mode == "SD" and target.p > 1:
        norms = []
        for n1 in ladder:
            for n2 in ladder:
                u = family(n1, n2)
                G = np.linalg.norm(u.physical_gradients.reshape(u.grid.ncells, -1), axis=-1)
                norms.append(float((np.sum(G ** target.p) * u.grid.cell_volume) ** (1 / target.p)))
        rep.sup_grad_norm = max(norms)
    return rep

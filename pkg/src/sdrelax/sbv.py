"""Piecewise-affine SBV fields on cube grids.

A field is affine on every cell, ``u(y) = v_c + G_c (y - y_c)``, where ``y``
are grid (canonical) coordinates.  The grid may represent a rotated cube
``Q_nu``: physical points are ``x = center + R^T y`` with ``R nu = e_1``, so
physical gradients are ``G_c R``.  Jumps live on cell facets and are
evaluated at facet midpoints.  Jump orientation: on a facet orthogonal to
axis ``k`` the normal is ``+e_k`` and ``[u] = u(upper cell) - u(lower cell)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "CubeGrid",
    "DiscreteSBVField",
    "FacetJump",
    "TestFunction",
    "make_field",
    "affine_field",
    "jumps",
    "energy",
    "EnergyModel",
    "piecewise_constant_approx",
    "discrete_alberti",
    "alberti_constants",
    "l1_distance",
    "moment_pairing",
    "moment_family",
    "prolong",
    "box_mask",
    "derivative_decomposition",
    "boundary_trace_integral",
    "field_to_json",
    "field_from_json",
]


def rotation_to_e1(nu) -> np.ndarray:
    """Orthogonal ``R`` with ``R @ nu = e_1`` (a rotation when N = 2)."""
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    if abs(np.linalg.norm(nu) - 1.0) > 1e-12:
        raise ValueError(f"normal must be a unit vector, got {nu}")
    if nu.size == 1:
        return np.array([[np.sign(nu[0])]])
    if nu.size == 2:
        return np.array([[nu[0], nu[1]], [-nu[1], nu[0]]])
    raise ValueError("only N in {1, 2} is supported")


@dataclass(frozen=True)
class CubeGrid:
    """``n**N`` congruent cells partitioning the cube ``Q_nu(center, side)``."""

    N: int
    d: int
    n: int
    center: tuple = None
    side: float = 1.0
    nu: tuple = None

    def __post_init__(self):
        if self.N not in (1, 2):
            raise ValueError("N must be 1 or 2")
        if self.d < 1 or self.n < 1:
            raise ValueError("d and n must be >= 1")
        if self.side <= 0:
            raise ValueError("side must be positive")
        center = (0.0,) * self.N if self.center is None else tuple(float(c) for c in np.atleast_1d(self.center))
        nu = (1.0,) + (0.0,) * (self.N - 1) if self.nu is None else tuple(float(c) for c in np.atleast_1d(self.nu))
        if len(center) != self.N or len(nu) != self.N:
            raise ValueError("center and nu must have N entries")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "side", float(self.side))
        rotation_to_e1(nu)

    @property
    def h(self) -> float:
        return self.side / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.N

    @property
    def ncells(self) -> int:
        return self.n ** self.N

    @property
    def cell_volume(self) -> float:
        return self.h ** self.N

    @property
    def facet_area(self) -> float:
        return self.h ** (self.N - 1)

    @property
    def volume(self) -> float:
        return self.side ** self.N

    @cached_property
    def rotation(self) -> np.ndarray:
        return rotation_to_e1(self.nu)

    @property
    def axis_aligned(self) -> bool:
        return bool(np.allclose(self.rotation, np.eye(self.N)))

    @cached_property
    def canonical_centers(self) -> np.ndarray:
        """Cell centres in grid coordinates, shape ``(ncells, N)``, row-major."""
        ticks = -self.side / 2 + (np.arange(self.n) + 0.5) * self.h
        mesh = np.meshgrid(*([ticks] * self.N), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def to_physical(self, y) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(y, dtype=float) @ self.rotation

    def to_canonical(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - np.asarray(self.center)) @ self.rotation.T

    @cached_property
    def centers(self) -> np.ndarray:
        """Physical cell centres, shape ``(ncells, N)``."""
        return self.to_physical(self.canonical_centers)

    def physical_normal(self, axis: int) -> np.ndarray:
        return self.rotation[axis].copy()

    def multi_index(self, flat) -> tuple:
        return np.unravel_index(flat, self.shape)

    def refined(self, k: int) -> "CubeGrid":
        return CubeGrid(self.N, self.d, self.n * k, self.center, self.side, self.nu)

    def with_(self, **kw) -> "CubeGrid":
        args = dict(N=self.N, d=self.d, n=self.n, center=self.center, side=self.side, nu=self.nu)
        args.update(kw)
        return CubeGrid(**args)

    def to_dict(self) -> dict:
        return {"N": self.N, "d": self.d, "n": self.n, "center": list(self.center),
                "side": self.side, "nu": list(self.nu)}


@dataclass(frozen=True, eq=False)
class DiscreteSBVField:
    """Per-cell affine data in row-major cell order.

    ``values[c]`` is the value at the centre of cell ``c`` (shape ``(d,)``)
    and ``gradients[c]`` the cell gradient in grid coordinates
    (shape ``(d, N)``).
    """

    grid: CubeGrid
    values: np.ndarray
    gradients: np.ndarray

    def __post_init__(self):
        g = self.grid
        v = np.array(self.values, dtype=float).reshape(g.ncells, g.d)
        G = np.array(self.gradients, dtype=float).reshape(g.ncells, g.d, g.N)
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(G))):
            raise ValueError("field data must be finite")
        v.setflags(write=False)
        G.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "gradients", G)

    @property
    def physical_gradients(self) -> np.ndarray:
        return self.gradients @ self.grid.rotation

    def __call__(self, x) -> np.ndarray:
        """Evaluate at physical points ``x`` (shape ``(..., N)``)."""
        g = self.grid
        y = g.to_canonical(x)
        idx = np.clip(np.floor((y + g.side / 2) / g.h).astype(int), 0, g.n - 1)
        flat = np.ravel_multi_index(tuple(np.moveaxis(idx, -1, 0)), g.shape)
        off = y - g.canonical_centers[flat]
        return self.values[flat] + np.einsum("...ij,...j->...i", self.gradients[flat], off)

    def replace(self, values=None, gradients=None) -> "DiscreteSBVField":
        return DiscreteSBVField(
            self.grid,
            self.values if values is None else values,
            self.gradients if gradients is None else gradients,
        )

    def __add__(self, other: "DiscreteSBVField") -> "DiscreteSBVField":
        _same_grid(self, other)
        return DiscreteSBVField(self.grid, self.values + other.values, self.gradients + other.gradients)

    def __sub__(self, other: "DiscreteSBVField") -> "DiscreteSBVField":
        _same_grid(self, other)
        return DiscreteSBVField(self.grid, self.values - other.values, self.gradients - other.gradients)

    def shifted(self, a) -> "DiscreteSBVField":
        return self.replace(values=self.values + np.asarray(a, dtype=float))


def _same_grid(f1, f2):
    if f1.grid != f2.grid:
        raise ValueError("fields live on different grids")


@dataclass(frozen=True)
class FacetJump:
    facet: tuple  # (axis, lower cell flat index)
    normal: np.ndarray
    jump: np.ndarray
    area: float
    midpoint: np.ndarray


def make_field(grid: CubeGrid, affine_data=None, *, values=None, gradients=None) -> DiscreteSBVField:
    """Build a field from per-cell ``(value, gradient)`` pairs or from arrays."""
    if affine_data is not None:
        affine_data = list(affine_data)
        if len(affine_data) != grid.ncells:
            raise ValueError(f"expected {grid.ncells} cells of affine data, got {len(affine_data)}")
        values = [np.asarray(v, dtype=float).reshape(grid.d) for v, _ in affine_data]
        gradients = [np.asarray(G, dtype=float).reshape(grid.d, grid.N) for _, G in affine_data]
    if values is None:
        raise ValueError("no field data given")
    values = np.asarray(values, dtype=float)
    if gradients is None:
        gradients = np.zeros((grid.ncells, grid.d, grid.N))
    gradients = np.asarray(gradients, dtype=float)
    if values.size != grid.ncells * grid.d:
        raise ValueError(f"expected {grid.ncells} x {grid.d} values, got shape {values.shape}")
    if gradients.size != grid.ncells * grid.d * grid.N:
        raise ValueError(f"expected {grid.ncells} x {grid.d} x {grid.N} gradients")
    return DiscreteSBVField(grid, values, gradients)


def affine_field(grid: CubeGrid, A, a=None, x0=None) -> DiscreteSBVField:
    """The field ``x -> a + A (x - x0)`` (physical gradient ``A``)."""
    A = np.asarray(A, dtype=float).reshape(grid.d, grid.N)
    a = np.zeros(grid.d) if a is None else np.asarray(a, dtype=float).reshape(grid.d)
    x0 = np.zeros(grid.N) if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    vals = a + (grid.centers - x0) @ A.T
    G = np.broadcast_to(A @ grid.rotation.T, (grid.ncells, grid.d, grid.N))
    return DiscreteSBVField(grid, vals, G)


# ------------------------------------------------------------------ facets

def _axis_pairs(grid: CubeGrid, axis: int):
    idx = np.arange(grid.ncells).reshape(grid.shape)
    lo = np.take(idx, np.arange(grid.n - 1), axis=axis).ravel()
    hi = np.take(idx, np.arange(1, grid.n), axis=axis).ravel()
    return lo, hi


def _boundary_cells(grid: CubeGrid, axis: int, upper: bool):
    idx = np.arange(grid.ncells).reshape(grid.shape)
    return np.take(idx, [grid.n - 1 if upper else 0], axis=axis).ravel()


def _facet_traces(field: DiscreteSBVField, axis: int):
    g = field.grid
    lo, hi = _axis_pairs(g, axis)
    half = g.h / 2
    t_lo = field.values[lo] + field.gradients[lo][:, :, axis] * half
    t_hi = field.values[hi] - field.gradients[hi][:, :, axis] * half
    mid = g.canonical_centers[lo].copy()
    mid[:, axis] += half
    return lo, hi, t_lo, t_hi, mid


def jumps(field: DiscreteSBVField, tol: float = 1e-12) -> list[FacetJump]:
    """Interior facets with a nonzero midpoint jump, in (axis, cell) order."""
    g = field.grid
    scale = max(1.0, float(np.max(np.abs(field.values), initial=0.0)))
    out = []
    for axis in range(g.N):
        lo, hi, t_lo, t_hi, mid = _facet_traces(field, axis)
        jmp = t_hi - t_lo
        nrm = g.physical_normal(axis)
        for i in np.flatnonzero(np.linalg.norm(jmp, axis=-1) > tol * scale):
            out.append(FacetJump((axis, int(lo[i])), nrm, jmp[i], g.facet_area, g.to_physical(mid[i])))
    return out


# ------------------------------------------------------------------ energy

def _bulk_callable(W, grid: CubeGrid, frozen_at=None):
    """Return ``f(x, G_canonical, *extras)`` evaluating the density in the physical frame."""
    R = grid.rotation
    x0 = None if frozen_at is None else np.atleast_1d(np.asarray(frozen_at, dtype=float))

    def f(x, G, *extra):
        if x0 is not None:
            x = np.broadcast_to(x0, np.shape(x))
        if not extra:
            return W(x, G @ R)
        return W(x, G @ R, *(U @ R for U in extra))

    return f


def _surface_callable(psi, grid: CubeGrid, frozen_at=None):
    x0 = None if frozen_at is None else np.atleast_1d(np.asarray(frozen_at, dtype=float))

    def f(x, lam, axis):
        if x0 is not None:
            x = np.broadcast_to(x0, np.shape(x))
        nu = np.broadcast_to(grid.physical_normal(axis), lam.shape[:-1] + (grid.N,))
        return psi(x, lam, nu)

    return f


class EnergyModel:
    """Vectorised evaluator of the discrete energy

    ``sum_cells W(x_c, grad u_c) |cell| + sum_facets psi(x_f, [u], nu) |facet|``

    restricted to ``region`` (a cell mask).  A facet counts when both cells
    lie in the region, or, with ``closed=True``, when at least one does.
    ``boundary`` is an optional callable giving the exterior trace at
    physical points; it adds the facets on the grid boundary.
    """

    def __init__(self, grid: CubeGrid, bulk, surface, region=None, closed=False,
                 boundary: Optional[Callable] = None, frozen_at=None, raw=False):
        self.grid = grid
        self.bulk = bulk if raw else _bulk_callable(bulk, grid, frozen_at)
        self.surface = surface if raw else _surface_callable(surface, grid, frozen_at)
        region = np.ones(grid.ncells, bool) if region is None else np.asarray(region, bool).ravel()
        if region.size != grid.ncells:
            raise ValueError("region mask has the wrong size")
        self.region = region
        self.cells = np.flatnonzero(region)
        self.x_cells = grid.centers[self.cells]
        half = grid.h / 2
        self.facets = []  # (axis, lo, hi, x_mid)
        for axis in range(grid.N):
            lo, hi = _axis_pairs(grid, axis)
            keep = (region[lo] | region[hi]) if closed else (region[lo] & region[hi])
            lo, hi = lo[keep], hi[keep]
            mid = grid.canonical_centers[lo].copy()
            mid[:, axis] += half
            self.facets.append((axis, lo, hi, grid.to_physical(mid)))
        self.boundary = []  # (axis, cells, sign, x_mid, exterior trace)
        if boundary is not None:
            for axis in range(grid.N):
                for upper in (False, True):
                    cells = _boundary_cells(grid, axis, upper)
                    cells = cells[region[cells]]
                    if cells.size == 0:
                        continue
                    mid = grid.canonical_centers[cells].copy()
                    mid[:, axis] += half if upper else -half
                    xm = grid.to_physical(mid)
                    ext = np.asarray(boundary(xm), dtype=float).reshape(len(cells), grid.d)
                    self.boundary.append((axis, cells, 1.0 if upper else -1.0, xm, ext))

    def cell_energies(self, values, grads, *extras):
        G = grads[self.cells]
        ex = tuple(U[self.cells] for U in extras)
        return np.asarray(self.bulk(self.x_cells, G, *ex), dtype=float) * self.grid.cell_volume

    def facet_jumps(self, values, grads):
        """List of ``(axis, jump array, x_mid)`` over interior and boundary facets."""
        half = self.grid.h / 2
        out = []
        for axis, lo, hi, xm in self.facets:
            j = (values[hi] - grads[hi][:, :, axis] * half) - (values[lo] + grads[lo][:, :, axis] * half)
            out.append((axis, j, xm))
        for axis, cells, sign, xm, ext in self.boundary:
            inner = values[cells] + sign * grads[cells][:, :, axis] * half
            j = (ext - inner) if sign > 0 else (inner - ext)
            out.append((axis, j, xm))
        return out

    def facet_energies(self, values, grads):
        area = self.grid.facet_area
        return [np.asarray(self.surface(xm, j, axis), dtype=float) * area
                for axis, j, xm in self.facet_jumps(values, grads)]

    def __call__(self, values, grads, *extras) -> float:
        total = float(np.sum(self.cell_energies(values, grads, *extras)))
        for e in self.facet_energies(values, grads):
            total += float(np.sum(e))
        return total

    def of(self, field: DiscreteSBVField, *extras) -> float:
        return self(field.values, field.gradients, *extras)


def energy(field: DiscreteSBVField, W, psi, *, region=None, closed=False,
           boundary=None, frozen_at=None) -> float:
    """Discrete energy of ``field`` (see :class:`EnergyModel`)."""
    for dens in (W, psi):
        N = getattr(dens, "N", field.grid.N)
        d = getattr(dens, "d", field.grid.d)
        if (N, d) != (field.grid.N, field.grid.d):
            raise ValueError(
                f"density dimensions (N={N}, d={d}) do not match the field "
                f"(N={field.grid.N}, d={field.grid.d})"
            )
    return EnergyModel(field.grid, W, psi, region, closed, boundary, frozen_at).of(field)


# -------------------------------------------------------- approximations

def box_mask(grid: CubeGrid, lo: Sequence[int], hi: Sequence[int]) -> np.ndarray:
    """Cells with multi-index in ``[lo, hi)`` (per axis)."""
    idx = np.indices(grid.shape).reshape(grid.N, -1)
    mask = np.ones(grid.ncells, bool)
    for k in range(grid.N):
        mask &= (idx[k] >= lo[k]) & (idx[k] < hi[k])
    return mask


def _block_ids(grid: CubeGrid, m: int):
    if m < 1 or grid.n % m:
        raise ValueError(f"coarseness m={m} must divide the grid resolution n={grid.n}")
    k = grid.n // m
    idx = np.indices(grid.shape).reshape(grid.N, -1) // k
    return np.ravel_multi_index(tuple(idx), (m,) * grid.N), k


def piecewise_constant_approx(field: DiscreteSBVField, m: int, rule: str = "mean") -> DiscreteSBVField:
    """Zero-gradient field, constant on each block of an ``m``-partition.

    ``rule="mean"`` uses block averages; ``rule="corner"`` samples the field
    at each block's lower corner (from the cell that owns the corner).
    ``m`` must divide the grid resolution.
    """
    g = field.grid
    blocks, k = _block_ids(g, m)
    if rule == "mean":
        sums = np.zeros((m ** g.N, g.d))
        np.add.at(sums, blocks, field.values)
        block_vals = sums / k ** g.N
    elif rule == "corner":
        idx = np.indices(g.shape).reshape(g.N, -1)
        owner = np.all(idx % k == 0, axis=0)
        corner_off = np.full(g.N, -g.h / 2)
        block_vals = np.zeros((m ** g.N, g.d))
        block_vals[blocks[owner]] = field.values[owner] + field.gradients[owner] @ corner_off
    else:
        raise ValueError(f"unknown rule {rule!r}")
    return DiscreteSBVField(g, block_vals[blocks], np.zeros_like(field.gradients))


def discrete_alberti(grid: CubeGrid, target, anchor: str = "center", block: int = 1) -> DiscreteSBVField:
    """Field whose cell gradients equal ``target`` exactly.

    ``anchor="center"`` makes the field vanish at every cell centre, so all
    mismatch with a primitive is carried by facet jumps.  ``anchor="corner"``
    extends each cell's affine piece to vanish at the lower corner of its
    ``block``-cell block; for a target constant on a block the field is then
    continuous inside that block.  ``target`` holds physical gradients, shape
    ``(ncells, d, N)`` or broadcastable.
    """
    F = np.broadcast_to(np.asarray(target, dtype=float), (grid.ncells, grid.d, grid.N))
    G = F @ grid.rotation.T
    if anchor == "center":
        return DiscreteSBVField(grid, np.zeros((grid.ncells, grid.d)), G)
    if anchor != "corner":
        raise ValueError(f"unknown anchor {anchor!r}")
    if block < 1 or grid.n % block:
        raise ValueError(f"block={block} must divide n={grid.n}")
    idx = np.indices(grid.shape).reshape(grid.N, -1).T
    corner = -grid.side / 2 + (idx // block) * block * grid.h
    offset = grid.canonical_centers - corner
    return DiscreteSBVField(grid, np.einsum("cij,cj->ci", G, offset), G)


def alberti_constants(grid: CubeGrid) -> dict:
    """Grid constants ``C`` in ``|D^s u| <= C ||f||_1`` and ``||u||_1 <= C ||f||_1``
    for the centre-anchored construction."""
    return {"jump": float(grid.N), "l1": math.sqrt(grid.N) * grid.h / 2}


def prolong(field: DiscreteSBVField, k: int) -> DiscreteSBVField:
    """Exact representation of ``field`` on the ``k``-times refined grid."""
    g = field.grid
    fine = g.refined(k)
    idx = np.indices(fine.shape).reshape(g.N, -1) // k
    parent = np.ravel_multi_index(tuple(idx), g.shape)
    off = fine.canonical_centers - g.canonical_centers[parent]
    vals = field.values[parent] + np.einsum("cij,cj->ci", field.gradients[parent], off)
    return DiscreteSBVField(fine, vals, field.gradients[parent])


# ------------------------------------------------------------- integrals

def _abs_linear_1d(c, b, h):
    """``int_{-h/2}^{h/2} |c + b t| dt``, elementwise."""
    c = np.asarray(c, dtype=float)
    b = np.abs(np.asarray(b, dtype=float))
    r = b * h / 2
    inside = np.abs(c) < r
    with np.errstate(divide="ignore", invalid="ignore"):
        mid = (c * c + r * r) / np.where(b > 0, b, 1.0)
    return np.where(inside, mid, np.abs(c) * h)


def _abs_linear_2d(a, b1, b2, h):
    """``int over [-h/2,h/2]^2 of |a + b1 s + b2 t|``.

    The inner integral in ``s`` is piecewise quadratic in ``t`` with
    breakpoints where ``|a + b2 t| = |b1| h/2`` or ``a + b2 t = 0``; Simpson's
    rule on each piece is exact.
    """
    out = np.empty(np.shape(a))
    for i, (ai, p, q) in enumerate(zip(np.ravel(a), np.ravel(b1), np.ravel(b2))):
        if abs(ai) >= (abs(p) + abs(q)) * h / 2:
            out.flat[i] = abs(ai) * h * h
            continue
        knots = [-h / 2, h / 2]
        if q != 0:
            r = abs(p) * h / 2
            for target in (-r, 0.0, r):
                t = (target - ai) / q
                if -h / 2 < t < h / 2:
                    knots.append(t)
        knots = np.unique(knots)
        total = 0.0
        for t0, t1 in zip(knots[:-1], knots[1:]):
            ts = np.array([t0, 0.5 * (t0 + t1), t1])
            vals = _abs_linear_1d(ai + q * ts, p, h)
            total += (t1 - t0) / 6 * (vals[0] + 4 * vals[1] + vals[2])
        out.flat[i] = total
    return out


def l1_distance(f1: DiscreteSBVField, f2: DiscreteSBVField, quad_points: int = 24) -> float:
    """``int |f1 - f2|`` over the cube.

    Exact for scalar fields (closed form per cell); vector-valued fields use
    tensor Gauss-Legendre quadrature with ``quad_points`` per axis.
    """
    _same_grid(f1, f2)
    g = f1.grid
    dv = f1.values - f2.values
    dG = f1.gradients - f2.gradients
    if g.d == 1:
        if g.N == 1:
            per = _abs_linear_1d(dv[:, 0], dG[:, 0, 0], g.h)
        else:
            per = _abs_linear_2d(dv[:, 0], dG[:, 0, 0], dG[:, 0, 1], g.h)
        return float(np.sum(per))
    t, w = np.polynomial.legendre.leggauss(quad_points)
    t, w = t * g.h / 2, w * g.h / 2
    mesh = np.meshgrid(*([t] * g.N), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    wts = np.prod(np.meshgrid(*([w] * g.N), indexing="ij"), axis=0).ravel()
    diff = dv[:, None, :] + np.einsum("cij,qj->cqi", dG, pts)
    return float(np.sum(np.linalg.norm(diff, axis=-1) * wts))


@dataclass(frozen=True)
class TestFunction:
    """Monomial ``x^powers`` or indicator of a dyadic sub-box of the cube.

    Dyadic boxes are indexed in grid coordinates: at ``level`` the cube is
    split into ``2**level`` slabs per axis and ``index`` picks one.
    """

    __test__ = False  # not a pytest class

    kind: str
    powers: tuple = ()
    level: int = 0
    index: tuple = ()

    def label(self) -> str:
        if self.kind == "monomial":
            return "x^" + ",".join(map(str, self.powers))
        return f"box{self.level}:" + ",".join(map(str, self.index))


def moment_family(N: int, max_degree: int = 2, max_level: int = 2) -> list[TestFunction]:
    """Monomials of degree <= 2 and dyadic box indicators at levels 0-2."""
    out = []
    for pw in np.ndindex(*([max_degree + 1] * N)):
        if sum(pw) <= max_degree:
            out.append(TestFunction("monomial", tuple(int(p) for p in pw)))
    for level in range(max_level + 1):
        for idx in np.ndindex(*([2 ** level] * N)):
            out.append(TestFunction("box", level=level, index=tuple(int(i) for i in idx)))
    return out


def moment_pairing(grid: CubeGrid, matrix_field, test: TestFunction) -> np.ndarray:
    """``int_Q F(x) phi(x) dx`` for a per-cell constant field ``F``.

    ``matrix_field`` has shape ``(ncells, ...)``; the result has the trailing
    shape.  Monomials are integrated with 2-point Gauss rules (exact for
    degree <= 3); box indicators by exact overlap volumes.
    """
    F = np.asarray(matrix_field, dtype=float)
    if F.shape[0] != grid.ncells:
        raise ValueError("matrix field must have one entry per cell")
    if test.kind == "monomial":
        if len(test.powers) != grid.N or sum(test.powers) > 3 or min(test.powers) < 0:
            raise ValueError(f"unsupported test function {test}")
        t = np.array([-1.0, 1.0]) / math.sqrt(3.0) * grid.h / 2
        mesh = np.meshgrid(*([t] * grid.N), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        w = grid.cell_volume / len(pts)
        y = grid.canonical_centers[:, None, :] + pts[None]
        x = grid.to_physical(y)
        phi = np.prod(x ** np.asarray(test.powers), axis=-1).sum(axis=1) * w
    elif test.kind == "box":
        if (len(test.index) != grid.N or test.level < 0
                or any(not 0 <= i < 2 ** test.level for i in test.index)):
            raise ValueError(f"unsupported test function {test}")
        width = grid.side / 2 ** test.level
        phi = np.ones(grid.ncells)
        for k in range(grid.N):
            lo = -grid.side / 2 + test.index[k] * width
            c = grid.canonical_centers[:, k]
            overlap = np.minimum(c + grid.h / 2, lo + width) - np.maximum(c - grid.h / 2, lo)
            phi *= np.clip(overlap, 0.0, None)
    else:
        raise ValueError(f"unsupported test function kind {test.kind!r}")
    return np.tensordot(phi, F, axes=(0, 0))


# --------------------------------------------------- derivative identities

def derivative_decomposition(field: DiscreteSBVField, lo, hi):
    """``(bulk, jump)`` parts of ``Du`` over the grid-aligned box ``[lo, hi)``,
    as ``d x N`` matrices in grid coordinates."""
    g = field.grid
    mask = box_mask(g, lo, hi)
    bulk = field.gradients[mask].sum(axis=0) * g.cell_volume
    jump = np.zeros((g.d, g.N))
    for axis in range(g.N):
        l, h_, t_lo, t_hi, _ = _facet_traces(field, axis)
        keep = mask[l] & mask[h_]
        jump[:, axis] += (t_hi - t_lo)[keep].sum(axis=0) * g.facet_area
    return bulk, jump


def boundary_trace_integral(field: DiscreteSBVField, lo, hi) -> np.ndarray:
    """``int_{boundary of box} u (x) n_out`` with midpoint traces."""
    g = field.grid
    mask = box_mask(g, lo, hi)
    idx = np.indices(g.shape).reshape(g.N, -1)
    half = g.h / 2
    out = np.zeros((g.d, g.N))
    for axis in range(g.N):
        upper = mask & (idx[axis] == hi[axis] - 1)
        lower = mask & (idx[axis] == lo[axis])
        out[:, axis] += (field.values[upper] + field.gradients[upper][:, :, axis] * half).sum(axis=0) * g.facet_area
        out[:, axis] -= (field.values[lower] - field.gradients[lower][:, :, axis] * half).sum(axis=0) * g.facet_area
    return out


# ---------------------------------------------------------- serialization

def field_to_json(field: DiscreteSBVField) -> str:
    """JSON text: grid header, then flat row-major values and gradients.

    Cell order is row-major over multi-indices (last axis fastest); each
    gradient is flattened row-major as ``d`` rows of ``N`` entries.  Floats
    are written with ``repr`` precision, so the text is reproducible.
    """
    return json.dumps({
        "grid": field.grid.to_dict(),
        "values": field.values.ravel().tolist(),
        "gradients": field.gradients.ravel().tolist(),
    }, sort_keys=True)


def field_from_json(text: str) -> DiscreteSBVField:
    data = json.loads(text)
    grid = CubeGrid(**data["grid"])
    return make_field(grid, values=data["values"], gradients=data["gradients"])

"""Masked Dirichlet minimisation on a cube grid.

The free region ``O`` is a cell mask; every other cell is fixed to the datum
and acts as the boundary collar.  The objective is the closed-region energy
(cells in ``O`` plus every facet touching ``O``).  Optional affine
constraints fix the mean over ``O`` of the cell gradients and of auxiliary
per-cell matrix fields.

Two paths:

* exact: ``N = 1``, convex bulk term, positively 1-homogeneous subadditive
  surface term, no ``x`` dependence.  Jensen plus subadditivity give the
  minimum ``|O| W(B) + psi(a_R - a_L - B|O|)`` in closed form.
* general: multi-start L-BFGS on a smoothed objective over the constraint
  manifold, followed by greedy facet-closing moves on the true objective.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .sbv import (
    CubeGrid,
    DiscreteSBVField,
    EnergyModel,
    _axis_pairs,
    field_to_json,
)

__all__ = ["MaskedProblem", "SolverBudget", "SolverOutcome", "solve_masked", "ConstraintError"]


class ConstraintError(RuntimeError):
    """Post-hoc verification of admissibility failed."""


@dataclass(frozen=True)
class SolverBudget:
    max_iter: int = 400
    restarts: int = 2
    smoothing: tuple = (1e-2, 1e-4, 1e-7)
    snap_sweeps: int = 2
    tol: float = 1e-10


@dataclass
class MaskedProblem:
    """One constrained minimisation.

    ``bulk(x, G, *U)`` and ``surface(x, lam, axis)`` work in grid coordinates
    (see :func:`sdrelax.sbv._bulk_callable`).  ``grad_mean`` is the target
    mean of the cell gradients over ``O`` (grid coordinates); ``None`` leaves
    it free.  ``extra_means`` gives one target per auxiliary field.
    """

    grid: CubeGrid
    datum: DiscreteSBVField
    region: np.ndarray
    bulk: Callable
    surface: Callable
    grad_mean: Optional[np.ndarray] = None
    zero_gradient: bool = False
    extra_means: tuple = ()
    exact_ok: bool = False

    def __post_init__(self):
        self.region = np.asarray(self.region, bool).ravel()
        if self.datum.grid != self.grid:
            raise ValueError("datum must live on the problem grid")
        if not self.region.any():
            raise ValueError("free region is empty")
        shape = (self.grid.d, self.grid.N)
        if self.grad_mean is not None:
            self.grad_mean = np.asarray(self.grad_mean, dtype=float).reshape(shape)
        self.extra_means = tuple(np.asarray(m, dtype=float).reshape(shape) for m in self.extra_means)

    @property
    def cells(self) -> np.ndarray:
        return np.flatnonzero(self.region)

    def model(self) -> EnergyModel:
        return EnergyModel(self.grid, self.bulk, self.surface, region=self.region,
                           closed=True, raw=True)


@dataclass
class SolverOutcome:
    value: float
    field: DiscreteSBVField
    extras: tuple
    iterations: int
    restarts: int
    exact: bool
    gap: float
    candidates: list = field(default_factory=list)


# ------------------------------------------------------------ verification

def check_admissible(problem: MaskedProblem, f: DiscreteSBVField, extras=(), tol=1e-10):
    """Raise :class:`ConstraintError` unless ``f`` satisfies every constraint."""
    out = ~problem.region
    if not (np.array_equal(f.values[out], problem.datum.values[out])
            and np.array_equal(f.gradients[out], problem.datum.gradients[out])):
        raise ConstraintError("field differs from the datum outside the free region")
    cells = problem.cells
    if problem.zero_gradient and np.any(f.gradients[cells] != 0):
        raise ConstraintError("gradients must vanish")
    if problem.grad_mean is not None:
        err = np.max(np.abs(f.gradients[cells].mean(axis=0) - problem.grad_mean))
        if err > tol * (1 + np.max(np.abs(problem.grad_mean))):
            raise ConstraintError(f"gradient mean constraint violated by {err:.3e}")
    for U, target in zip(extras, problem.extra_means):
        err = np.max(np.abs(U[cells].mean(axis=0) - target))
        if err > tol * (1 + np.max(np.abs(target))):
            raise ConstraintError(f"auxiliary mean constraint violated by {err:.3e}")


# ---------------------------------------------------------------- exact path

def _exact_1d(problem: MaskedProblem) -> Optional[SolverOutcome]:
    g = problem.grid
    cells = problem.cells
    if g.N != 1 or problem.extra_means or not problem.exact_ok:
        return None
    if problem.grad_mean is None and not problem.zero_gradient:
        return None
    if np.any(np.diff(cells) != 1) or cells[0] == 0 or cells[-1] == g.n - 1:
        return None
    h = g.h
    dv, dG = problem.datum.values, problem.datum.gradients
    left = cells[0] - 1
    a_left = dv[left] + dG[left][:, 0] * h / 2
    B = np.zeros((g.d, 1)) if problem.zero_gradient else problem.grad_mean
    y = g.canonical_centers[cells, 0]
    y_left = y[0] - h / 2
    vals = np.array(dv)
    grads = np.array(dG)
    vals[cells] = a_left + np.outer(y - y_left, B[:, 0])
    grads[cells] = B
    f = DiscreteSBVField(g, vals, grads)
    value = problem.model().of(f)
    return SolverOutcome(value, f, (), 0, 0, True, 0.0)


# -------------------------------------------------------------- general path

class _Objective:
    """Smoothed objective with finite-difference density derivatives."""

    def __init__(self, problem: MaskedProblem):
        self.p = problem
        g = problem.grid
        self.g = g
        self.cells = problem.cells
        self.nO = len(self.cells)
        self.d, self.N = g.d, g.N
        self.x_cells = g.centers[self.cells]
        self.vol, self.area, self.half = g.cell_volume, g.facet_area, g.h / 2
        region = problem.region
        self.facets = []
        for axis in range(g.N):
            lo, hi = _axis_pairs(g, axis)
            keep = region[lo] | region[hi]
            lo, hi = lo[keep], hi[keep]
            mid = g.canonical_centers[lo].copy()
            mid[:, axis] += self.half
            self.facets.append((axis, lo, hi, g.to_physical(mid)))
        self.n_extra = len(problem.extra_means)
        self.free_grad = not problem.zero_gradient
        self.base_v = np.array(problem.datum.values)
        self.base_G = np.array(problem.datum.gradients)
        mshape = (self.nO, self.d, self.N)
        self.sizes = [self.nO * self.d] + ([int(np.prod(mshape))] if self.free_grad else []) \
            + [int(np.prod(mshape))] * self.n_extra

    # parameter <-> fields
    def _project(self, Z, target):
        if target is None:
            return Z
        return Z - Z.mean(axis=0) + target

    def project_full(self, U, target):
        out = np.zeros_like(U)
        out[self.cells] = self._project(U[self.cells], target)
        return out

    def unpack(self, theta):
        parts = np.split(theta, np.cumsum(self.sizes)[:-1])
        v = self.base_v.copy()
        v[self.cells] = parts[0].reshape(self.nO, self.d)
        G = self.base_G.copy()
        k = 1
        if self.free_grad:
            G[self.cells] = self._project(parts[1].reshape(self.nO, self.d, self.N), self.p.grad_mean)
            k = 2
        else:
            G[self.cells] = 0.0
        extras = []
        for target in self.p.extra_means:
            U = np.zeros_like(self.base_G)
            U[self.cells] = self._project(parts[k].reshape(self.nO, self.d, self.N), target)
            extras.append(U)
            k += 1
        return v, G, tuple(extras)

    def pack(self, v, G, extras=()):
        parts = [v[self.cells].ravel()]
        if self.free_grad:
            parts.append(G[self.cells].ravel())
        for U in extras:
            parts.append(U[self.cells].ravel())
        return np.concatenate(parts)

    def _jumps(self, v, G):
        out = []
        for axis, lo, hi, xm in self.facets:
            j = (v[hi] - G[hi][:, :, axis] * self.half) - (v[lo] + G[lo][:, :, axis] * self.half)
            out.append((axis, lo, hi, xm, j))
        return out

    def _psi_eps(self, xm, j, axis, eps):
        nj = np.linalg.norm(j, axis=-1)
        return np.asarray(self.p.surface(xm, j, axis)) * nj / np.sqrt(nj * nj + eps * eps)

    def __call__(self, theta, eps):
        v, G, extras = self.unpack(theta)
        Gc = G[self.cells]
        Uc = tuple(U[self.cells] for U in extras)
        mats = (Gc,) + Uc
        base = np.asarray(self.p.bulk(self.x_cells, *mats), dtype=float)
        total = float(base.sum()) * self.vol
        dmats = [np.zeros_like(M) for M in mats]
        for which, M in enumerate(mats):
            if which == 0 and not self.free_grad:
                continue
            step = 1e-6 * (1.0 + np.abs(M))
            for i in range(self.d):
                for k in range(self.N):
                    Mp, Mm = M.copy(), M.copy()
                    Mp[:, i, k] += step[:, i, k]
                    Mm[:, i, k] -= step[:, i, k]
                    args_p = list(mats)
                    args_m = list(mats)
                    args_p[which], args_m[which] = Mp, Mm
                    fp = np.asarray(self.p.bulk(self.x_cells, *args_p), dtype=float)
                    fm = np.asarray(self.p.bulk(self.x_cells, *args_m), dtype=float)
                    dmats[which][:, i, k] = (fp - fm) / (2 * step[:, i, k]) * self.vol
        gv = np.zeros_like(v)
        gG = np.zeros_like(G)
        for axis, lo, hi, xm, j in self._jumps(v, G):
            e = self._psi_eps(xm, j, axis, eps)
            total += float(e.sum()) * self.area
            dj = np.zeros_like(j)
            step = min(1e-7, eps * 1e-3) * (1.0 + np.abs(j))
            for i in range(self.d):
                jp, jm = j.copy(), j.copy()
                jp[:, i] += step[:, i]
                jm[:, i] -= step[:, i]
                dj[:, i] = (self._psi_eps(xm, jp, axis, eps) - self._psi_eps(xm, jm, axis, eps)) / (2 * step[:, i])
            dj *= self.area
            np.add.at(gv, hi, dj)
            np.add.at(gv, lo, -dj)
            np.add.at(gG[:, :, axis], hi, -dj * self.half)
            np.add.at(gG[:, :, axis], lo, -dj * self.half)
        gG[self.cells] += dmats[0]
        grads = [gv[self.cells].ravel()]
        if self.free_grad:
            gz = gG[self.cells]
            if self.p.grad_mean is not None:
                gz = gz - gz.mean(axis=0)
            grads.append(gz.ravel())
        for which, target in enumerate(self.p.extra_means, start=1):
            gz = dmats[which]
            grads.append((gz - gz.mean(axis=0)).ravel())
        return total, np.concatenate(grads)


def _snap(problem: MaskedProblem, model: EnergyModel, v, G, extras, sweeps: int):
    """Greedy moves that close single facets when the true energy drops."""
    g = problem.grid
    half = g.h / 2
    best = model(v, G, *extras)
    idx = np.indices(g.shape).reshape(g.N, -1).T
    for _ in range(sweeps):
        improved = False
        for c in problem.cells:
            for axis in range(g.N):
                for side in (-1, 1):
                    nb_idx = idx[c].copy()
                    nb_idx[axis] += side
                    if not (0 <= nb_idx[axis] < g.n):
                        continue
                    nb = int(np.ravel_multi_index(tuple(nb_idx), g.shape))
                    trace_nb = v[nb] - side * G[nb][:, axis] * half
                    new = trace_nb - side * G[c][:, axis] * half
                    if np.array_equal(new, v[c]):
                        continue
                    old = v[c].copy()
                    v[c] = new
                    e = model(v, G, *extras)
                    if e < best - 1e-15 * (1 + abs(best)):
                        best, improved = e, True
                    else:
                        v[c] = old
        if not improved:
            break
    return best


def _initial_candidates(problem: MaskedProblem, obj: _Objective, budget: SolverBudget, seed: int,
                        warm: Sequence = ()):
    g = problem.grid
    cells = problem.cells
    cands = []
    dv, dG = np.array(problem.datum.values), np.array(problem.datum.gradients)

    def extras_const():
        return tuple(np.broadcast_to(m, dG.shape).copy() for m in problem.extra_means)

    # datum extension, gradients projected onto the constraint set
    G0 = dG.copy()
    if problem.zero_gradient:
        G0[cells] = 0.0
    elif problem.grad_mean is not None:
        G0[cells] = obj._project(G0[cells], problem.grad_mean)
    cands.append(("datum", dv.copy(), G0, extras_const()))
    # uniform target gradient, affine values matching the datum mean
    if not problem.zero_gradient and problem.grad_mean is not None:
        B = problem.grad_mean
        G1 = dG.copy()
        G1[cells] = B
        y = g.canonical_centers[cells]
        v1 = dv.copy()
        shift = dv[cells].mean(axis=0) - (y @ B.T).mean(axis=0)
        v1[cells] = y @ B.T + shift
        cands.append(("uniform", v1, G1, extras_const()))
    for k, (fv, fG, fx) in enumerate(warm):
        v2, G2 = dv.copy(), dG.copy()
        v2[cells], G2[cells] = fv[cells], fG[cells]
        if problem.zero_gradient:
            G2[cells] = 0.0
        elif problem.grad_mean is not None:
            G2[cells] = obj._project(G2[cells], problem.grad_mean)
        ex = tuple(np.array(U) for U in fx) if fx else extras_const()
        cands.append((f"warm{k}", v2, G2, ex))
    for r in range(budget.restarts):
        rng = np.random.default_rng([seed, r])
        scale = 1.0 + float(np.max(np.abs(dv), initial=0.0))
        v3 = dv.copy()
        v3[cells] = dv[cells] + 0.25 * scale * rng.standard_normal(dv[cells].shape)
        G3 = dG.copy()
        if problem.zero_gradient:
            G3[cells] = 0.0
        else:
            G3[cells] = dG[cells] + rng.standard_normal(dG[cells].shape)
            if problem.grad_mean is not None:
                G3[cells] = obj._project(G3[cells], problem.grad_mean)
        ex = tuple(obj.project_full(U + rng.standard_normal(U.shape), m)
                   for U, m in zip(extras_const(), problem.extra_means))
        cands.append((f"restart{r}", v3, G3, ex))
    return cands


def solve_masked(problem: MaskedProblem, budget: SolverBudget = SolverBudget(), seed: int = 0,
                 warm: Sequence = ()) -> SolverOutcome:
    """Minimise ``problem``; returns the best admissible field found."""
    exact = _exact_1d(problem)
    if exact is not None:
        check_admissible(problem, exact.field)
        return exact
    obj = _Objective(problem)
    model = problem.model()
    g = problem.grid
    results = []
    iterations = 0
    for name, v, G, extras in _initial_candidates(problem, obj, budget, seed, warm):
        theta = obj.pack(v, G, extras)
        best_local = None
        for eps in budget.smoothing:
            res = minimize(obj, theta, args=(eps,), jac=True, method="L-BFGS-B",
                           options={"maxiter": budget.max_iter, "ftol": 1e-15, "gtol": 1e-12})
            iterations += int(res.nit)
            theta = res.x
            vv, GG, ex = obj.unpack(theta)
            e = model(vv, GG, *ex)
            if best_local is None or e < best_local[0]:
                best_local = (e, vv, GG, ex)
        v0, G0, ex0 = obj.unpack(obj.pack(v, G, extras))
        e0 = model(v0, G0, *ex0)
        if e0 <= best_local[0]:
            best_local = (e0, v0, G0, ex0)
        e, vv, GG, ex = best_local
        vv = np.array(vv)
        e = _snap(problem, model, vv, GG, ex, budget.snap_sweeps)
        results.append((e, name, vv, GG, ex))
    values = [r[0] for r in results]
    best_val = min(values)
    tied = [r for r in results if r[0] <= best_val + 1e-12 * (1 + abs(best_val))]

    def key(r):
        return field_to_json(DiscreteSBVField(g, r[2], r[3]))

    e, _, vv, GG, ex = min(tied, key=key)
    f = DiscreteSBVField(g, vv, GG)
    check_admissible(problem, f, ex)
    value = model(f.values, f.gradients, *ex)
    gap = float(max(values) - min(values))
    return SolverOutcome(value, f, ex, iterations, len(results), False, gap,
                         candidates=[(r[1], r[0]) for r in results])

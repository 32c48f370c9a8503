"""Cell problems for the relaxed densities and the Dirichlet-type functional.

Conventions
-----------
* A cell problem on ``Q_nu(x0, side)`` with ``n`` cells per side is solved on
  an enlarged grid of ``n + 2*collar`` cells.  The collar cells carry the
  boundary datum and are never modified; facets between the collar and the
  cube are charged by the surface density, so the boundary condition holds in
  the relaxed (trace) sense.
* Mean constraints are averages: ``mean_O grad u = B``.
* Cell problems freeze the densities at ``x0``; Dirichlet problems and
  blow-ups use the densities as given.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .densities import BulkDensity, SurfaceDensity, frobenius, recession_density
from .sbv import (
    CubeGrid,
    DiscreteSBVField,
    _bulk_callable,
    _surface_callable,
    affine_field,
    box_mask,
    field_to_json,
    make_field,
    prolong,
)
from .solver import MaskedProblem, SolverBudget, solve_masked

__all__ = [
    "CellProblemSpec",
    "SolveResult",
    "BlowupResult",
    "solve_bulk_cell",
    "solve_surface_cell",
    "solve_dirichlet",
    "solve",
    "blowup_bulk",
    "blowup_surface",
    "refine_ladder",
    "growth_constants",
    "growth_sandwich",
    "jump_datum",
    "result_rows",
    "rows_to_csv",
]

KINDS = ("bulk", "surface", "dirichlet-general")


@dataclass
class CellProblemSpec:
    """One constrained minimisation instance.

    ``B`` lists the mean targets: ``[B]`` for single-level problems or
    ``[B1, B2]`` for the two-level Dirichlet functional (which then needs
    ``functional``).  ``region`` is the box ``(lo, hi)`` of free cells in the
    grid of ``g`` (dirichlet-general only).
    """

    kind: str
    W: BulkDensity
    psi: SurfaceDensity
    p: Optional[float] = None
    A: Optional[np.ndarray] = None
    B: Sequence = ()
    lam: Optional[np.ndarray] = None
    theta: Optional[np.ndarray] = None
    nu: Optional[np.ndarray] = None
    g: Optional[DiscreteSBVField] = None
    region: Optional[tuple] = None
    a: Optional[np.ndarray] = None
    n: int = 8
    x0: Optional[np.ndarray] = None
    side: float = 1.0
    collar: int = 1
    budget: SolverBudget = SolverBudget()
    seed: int = 0
    tol: float = 1e-9
    frozen: bool = True
    normalize: bool = True
    functional: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.p is None:
            self.p = self.W.p
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.collar < 1:
            raise ValueError("collar must be at least one cell")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        N, d = self.N, self.d
        if (self.psi.N, self.psi.d) != (N, d):
            raise ValueError("bulk and surface densities disagree on (N, d)")
        shape = (d, N)
        if self.A is not None:
            self.A = _matrix(self.A, shape, "A")
        self.B = [_matrix(b, shape, "B") if np.ndim(b) <= 2 else np.asarray(b, float) for b in self.B]
        for name in ("lam", "theta", "a"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, _vector(val, d, name))
        self.x0 = np.zeros(N) if self.x0 is None else _vector(self.x0, N, "x0")
        if self.nu is None:
            self.nu = np.eye(N)[0]
        self.nu = _vector(self.nu, N, "nu")
        if abs(np.linalg.norm(self.nu) - 1) > 1e-12:
            raise ValueError("nu must be a unit vector")
        if self.kind == "bulk" and (self.A is None or len(self.B) != 1):
            raise ValueError("bulk cell problems need A and one mean target B")
        if self.kind == "surface" and self.lam is None:
            raise ValueError("surface cell problems need lambda")
        if self.kind == "dirichlet-general":
            if self.g is None or self.region is None:
                raise ValueError("dirichlet problems need g and region")
            if len(self.B) not in (1, 2):
                raise ValueError("dirichlet problems need one or two mean targets")
            if len(self.B) == 2 and self.functional is None:
                raise ValueError("two mean targets need a two-level functional")

    @property
    def N(self) -> int:
        return self.W.N

    @property
    def d(self) -> int:
        return self.W.d

    @property
    def delta1(self) -> int:
        return 1 if self.p == 1 else 0

    def with_(self, **kw) -> "CellProblemSpec":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        def arr(v):
            return None if v is None else np.asarray(v).tolist()

        out = {
            "kind": self.kind,
            "W": density_spec(self.W),
            "psi": density_spec(self.psi),
            "p": self.p,
            "A": arr(self.A),
            "B": [arr(b) for b in self.B],
            "lambda": arr(self.lam),
            "theta": arr(self.theta),
            "nu": arr(self.nu),
            "a": arr(self.a),
            "n": self.n,
            "x0": arr(self.x0),
            "side": self.side,
            "collar": self.collar,
            "seed": self.seed,
            "tol": self.tol,
            "frozen": self.frozen,
            "normalize": self.normalize,
            "budget": {"max_iter": self.budget.max_iter, "restarts": self.budget.restarts},
        }
        if self.g is not None:
            out["g"] = json.loads(field_to_json(self.g))
            out["region"] = [list(self.region[0]), list(self.region[1])]
        return out


def density_spec(dens) -> dict:
    """Serializable description of a density (catalog name or formula)."""
    from .catalog import CATALOG

    if dens.name in CATALOG and dens.source == CATALOG[dens.name].text:
        return {"catalog": dens.name}
    if not dens.source:
        raise ValueError("density has no formula text and cannot be serialized")
    out = {"expr": dens.source}
    if isinstance(dens, BulkDensity):
        out.update(p=dens.p, lipschitz_const=dens.lipschitz_const,
                   coercivity_const=dens.coercivity_const, convex=dens.convex)
        if dens.w3_params is not None:
            out["w3_params"] = list(dens.w3_params)
    else:
        out.update(lower_const=dens.lower_const, upper_const=dens.upper_const,
                   subadditive=dens.subadditive)
        if dens.jump_scale is not None:
            out["jump_scale"] = dens.jump_scale
    return out


def spec_from_dict(data: dict, N: Optional[int] = None, d: Optional[int] = None) -> CellProblemSpec:
    """Inverse of :meth:`CellProblemSpec.to_dict`."""
    from .catalog import resolve_density
    from .sbv import field_from_json

    data = dict(data)
    g = None
    if data.get("g") is not None:
        g = field_from_json(json.dumps(data["g"]))
        N, d = g.grid.N, g.grid.d
    if N is None or d is None:
        N, d = _infer_dims(data)
    W = resolve_density(data["W"], "bulk", N, d)
    psi = resolve_density(data["psi"], "surface", N, d)
    budget = SolverBudget(**data.get("budget", {}))
    region = data.get("region")
    return CellProblemSpec(
        kind=data["kind"], W=W, psi=psi, p=data.get("p"), A=data.get("A"),
        B=data.get("B", []), lam=data.get("lambda"), theta=data.get("theta"),
        nu=data.get("nu"), a=data.get("a"), n=int(data.get("n", 8)), x0=data.get("x0"),
        side=float(data.get("side", 1.0)), collar=int(data.get("collar", 1)),
        budget=budget, seed=int(data.get("seed", 0)), tol=float(data.get("tol", 1e-9)),
        frozen=bool(data.get("frozen", True)), normalize=bool(data.get("normalize", True)),
        g=g, region=None if region is None else (tuple(region[0]), tuple(region[1])),
    )


def _infer_dims(data):
    N = data.get("N")
    d = data.get("d")
    if N is not None and d is not None:
        return int(N), int(d)
    for key in ("A", "B"):
        val = data.get(key)
        if key == "B" and val:
            val = val[0]
        if val is not None:
            arr = np.asarray(val, dtype=float)
            if arr.ndim == 2:
                return arr.shape[1], arr.shape[0]
            return 1, 1
    if data.get("nu") is not None:
        N = len(np.atleast_1d(data["nu"]))
    if data.get("lambda") is not None:
        d = len(np.atleast_1d(data["lambda"]))
    return int(N or 1), int(d or 1)


def _matrix(v, shape, name):
    arr = np.asarray(v, dtype=float)
    if arr.size != shape[0] * shape[1]:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def _vector(v, n, name):
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    if arr.shape != (n,):
        raise ValueError(f"{name} must have {n} entries, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


@dataclass
class SolveResult:
    """Value, minimiser (on the grid including the collar) and diagnostics."""

    value: float
    minimizer: DiscreteSBVField
    region: np.ndarray
    diagnostics: dict
    history: list = field(default_factory=list)
    extras: tuple = ()

    @property
    def certified(self) -> bool:
        return bool(self.diagnostics.get("certified_convex", False))

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "diagnostics": _plain(self.diagnostics),
            "history": [list(h) for h in self.history],
            "minimizer": json.loads(field_to_json(self.minimizer)),
            "region": np.flatnonzero(self.region).tolist(),
        }


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


# --------------------------------------------------------- growth sandwich

def growth_constants(W: BulkDensity, psi: SurfaceDensity, x0=None) -> dict:
    """Constants of the discrete growth sandwich.

    Upper: ``V <= C (vol + ||G||_p^p + |Dg|)`` with
    ``C = max(W(x0,0) + C_W + g_N C_psi, 2 C_W + g_N C_psi)``, where
    ``g_N = N**1.5`` bounds the boundary integral of ``|y|`` on a unit cube.
    Lower: ``V >= k (||G||_p^p + |Dg|) - vol (k + 1/c_W)`` with
    ``k = min(c_W/2, c_psi)``.
    """
    x0 = np.zeros(W.N) if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    W0 = float(W(x0, np.zeros((W.d, W.N))))
    geo = W.N ** 1.5
    Cw, Cp = W.lipschitz_const, psi.upper_const
    C = max(W0 + Cw + geo * Cp, 2 * Cw + geo * Cp, geo * Cp, 1.0)
    kappa = min(W.coercivity_const / 2, psi.lower_const)
    return {"C": C, "kappa": kappa, "c_W": W.coercivity_const, "W0": W0}


def growth_sandwich(consts: dict, vol: float, g_terms: float, dg: float) -> tuple[float, float]:
    """``(lower, upper)`` bounds for a solve value.

    ``g_terms`` is the sum of the ``||G_i||`` terms over the region and ``dg``
    the total variation of the boundary datum's flux ``|int_{dO} g (x) n|``.
    """
    k = consts["kappa"]
    lower = k * (g_terms + dg) - vol * (k + 1.0 / consts["c_W"])
    upper = consts["C"] * (vol + g_terms + dg)
    return lower, upper


def _attach_sandwich(res: "SolveResult", W, psi, x0, vol, g_terms, dg):
    consts = growth_constants(W, psi, x0)
    lo, hi = growth_sandwich(consts, vol, g_terms, dg)
    slack = 1e-9 * (1 + abs(res.value))
    res.diagnostics["sandwich"] = (lo, hi)
    res.diagnostics["sandwich_ok"] = bool(lo - slack <= res.value <= hi + slack)


# --------------------------------------------------------------- problems

def _cell_geometry(spec: CellProblemSpec):
    w = spec.collar
    n_full = spec.n + 2 * w
    grid = CubeGrid(spec.N, spec.d, n_full, center=tuple(spec.x0),
                    side=spec.side * n_full / spec.n, nu=tuple(spec.nu))
    region = box_mask(grid, (w,) * spec.N, (w + spec.n,) * spec.N)
    return grid, region


def jump_datum(grid: CubeGrid, lam, theta=None) -> DiscreteSBVField:
    """``lam`` on the side ``(x - center) . nu > 0``, ``theta`` elsewhere."""
    lam = np.asarray(lam, dtype=float).reshape(grid.d)
    theta = np.zeros(grid.d) if theta is None else np.asarray(theta, dtype=float).reshape(grid.d)
    y1 = grid.canonical_centers[:, 0]
    vals = np.where((y1 > 0)[:, None], lam, theta)
    return make_field(grid, values=vals)


def _canon(M, grid: CubeGrid):
    return np.asarray(M, dtype=float) @ grid.rotation.T


def _exact_ok(W: BulkDensity, psi: SurfaceDensity, frozen: bool, convex: Optional[bool] = None) -> bool:
    convex = W.convex if convex is None else convex
    homog = frozen or (W.homogeneous and psi.homogeneous)
    return bool(W.N == 1 and convex and psi.subadditive and homog)


def _wrap(out, grid, region, spec_kind, extra_diag=None) -> SolveResult:
    diag = {
        "iterations": out.iterations,
        "restarts": out.restarts,
        "certified_convex": out.exact,
        "gap": out.gap,
        "path": "exact" if out.exact else "general",
        "kind": spec_kind,
    }
    if extra_diag:
        diag.update(extra_diag)
    return SolveResult(out.value, out.field, region, diag, [], out.extras)


def _trivial(grid, region, datum, model_value, kind, reason) -> SolveResult:
    diag = {"iterations": 0, "restarts": 0, "certified_convex": True, "gap": 0.0,
            "path": "trivial", "kind": kind, "reason": reason}
    return SolveResult(model_value, datum, region, diag)


def solve_bulk_cell(spec: CellProblemSpec, warm: Sequence = ()) -> SolveResult:
    """``H_p(x0, A, B)`` times the cube volume: affine datum ``A`` on the
    collar, mean gradient ``B`` over the cube."""
    if spec.kind != "bulk":
        raise ValueError("spec.kind must be 'bulk'")
    grid, region = _cell_geometry(spec)
    a = np.zeros(spec.d) if spec.a is None else spec.a
    datum = affine_field(grid, spec.A, a, spec.x0)
    frozen = spec.x0 if spec.frozen else None
    bulk = _bulk_callable(spec.W, grid, frozen)
    surface = _surface_callable(spec.psi, grid, frozen)
    B = spec.B[0]
    problem = MaskedProblem(grid, datum, region, bulk, surface, grad_mean=_canon(B, grid),
                            exact_ok=_exact_ok(spec.W, spec.psi, spec.frozen))
    vol = spec.side ** spec.N
    if np.array_equal(spec.A, B) and spec.W.convex and (spec.frozen or spec.W.homogeneous):
        res = _trivial(grid, region, datum, problem.model().of(datum), "bulk", "A == B")
    else:
        res = _wrap(solve_masked(problem, spec.budget, spec.seed, warm), grid, region, "bulk")
    res.diagnostics["normalized_value"] = res.value / vol
    _attach_sandwich(res, spec.W, spec.psi, spec.x0, vol,
                     float(frobenius(B) ** spec.p) * vol, float(frobenius(spec.A)) * vol)
    return res


def solve_surface_cell(spec: CellProblemSpec, warm: Sequence = ()) -> SolveResult:
    """``h_p(x0, lam - theta, nu)`` times the facet area ``side**(N-1)``.

    For ``p > 1`` gradients vanish; for ``p = 1`` the bulk term is the
    recession function with mean-zero gradients.  With ``normalize`` the
    datum is translated to ``(lam - theta, 0)``.
    """
    if spec.kind != "surface":
        raise ValueError("spec.kind must be 'surface'")
    grid, region = _cell_geometry(spec)
    lam = spec.lam
    theta = np.zeros(spec.d) if spec.theta is None else spec.theta
    if spec.normalize:
        lam, theta = lam - theta, np.zeros(spec.d)
    datum = jump_datum(grid, lam, theta)
    frozen = spec.x0 if spec.frozen else None
    surface = _surface_callable(spec.psi, grid, frozen)
    extra = {}
    rec_error = None
    if spec.delta1:
        rec, rec_error = recession_density(spec.W)
        W_eff = spec.W.with_(func=rec, p=1.0)
        bulk = _bulk_callable(W_eff, grid, frozen)
        problem = MaskedProblem(grid, datum, region, bulk, surface,
                                grad_mean=np.zeros((spec.d, spec.N)),
                                exact_ok=_exact_ok(spec.W, spec.psi, spec.frozen))
    else:
        bulk = _bulk_callable(spec.W, grid, frozen)
        problem = MaskedProblem(grid, datum, region, bulk, surface, zero_gradient=True,
                                exact_ok=_exact_ok(spec.W, spec.psi, spec.frozen, convex=True))
    area = spec.side ** (spec.N - 1)
    vol = spec.side ** spec.N
    if np.array_equal(lam, theta):
        res = _trivial(grid, region, datum, problem.model().of(datum), "surface", "lambda == theta")
    else:
        res = _wrap(solve_masked(problem, spec.budget, spec.seed, warm), grid, region, "surface")
    if rec_error is not None:
        f = res.minimizer
        x = grid.centers[region]
        G = f.physical_gradients[region]
        err = float(np.sum(np.asarray(rec_error(x, G))) * grid.cell_volume)
        res.diagnostics["recession_error"] = err
        res.diagnostics["gap"] += err
    res.diagnostics["normalized_value"] = res.value / area
    res.diagnostics.update(extra)
    _attach_sandwich(res, spec.W, spec.psi, spec.x0, vol, 0.0,
                     float(np.linalg.norm(spec.lam - (0 if spec.theta is None else spec.theta))) * area)
    return res


def solve_dirichlet(spec: CellProblemSpec, warm: Sequence = ()) -> SolveResult:
    """``m(g, B; O)`` (single level, ``U = grad u``) or ``m_{2,p}(g, B1, B2; O)``
    with a two-level ``functional = (f(x, A, U1, U2), psi2(x, lam, nu))``.

    ``O`` is the cell box ``region = (lo, hi)`` of ``g``'s grid; cells
    outside ``O`` are fixed to ``g``.  Targets may be constant matrices or
    per-cell fields (their mean over ``O`` is used).
    """
    if spec.kind != "dirichlet-general":
        raise ValueError("spec.kind must be 'dirichlet-general'")
    g = spec.g
    grid = g.grid
    lo, hi = (tuple(int(i) for i in spec.region[0]), tuple(int(i) for i in spec.region[1]))
    if len(lo) != grid.N or len(hi) != grid.N:
        raise ValueError("region must give N lower and N upper cell indices")
    for k in range(grid.N):
        if not (spec.collar <= lo[k] < hi[k] <= grid.n - spec.collar):
            raise ValueError(
                f"region {spec.region} is not a grid-aligned box leaving a collar of "
                f"{spec.collar} cell(s) inside the grid"
            )
    region = box_mask(grid, lo, hi)
    targets = []
    for b in spec.B:
        b = np.asarray(b, dtype=float)
        if b.ndim == 3:
            b = b.reshape(grid.ncells, grid.d, grid.N)[region].mean(axis=0)
        targets.append(_canon(b.reshape(grid.d, grid.N), grid))
    if spec.functional is None:
        bulk = _bulk_callable(spec.W, grid)
        surface = _surface_callable(spec.psi, grid)
        problem = MaskedProblem(grid, g, region, bulk, surface, grad_mean=targets[0],
                                exact_ok=_exact_ok(spec.W, spec.psi, frozen=False))
    else:
        fbulk, fsurf = spec.functional
        bulk = _bulk_callable(fbulk, grid)
        surface = _surface_callable(fsurf, grid)
        problem = MaskedProblem(grid, g, region, bulk, surface, extra_means=tuple(targets))
    res = _wrap(solve_masked(problem, spec.budget, spec.seed, warm), grid, region, "dirichlet-general")
    return res


def solve(spec: CellProblemSpec, warm: Sequence = ()) -> SolveResult:
    return {"bulk": solve_bulk_cell, "surface": solve_surface_cell,
            "dirichlet-general": solve_dirichlet}[spec.kind](spec, warm)


# ------------------------------------------------------------------ ladders

def _check_nested(ladder: Sequence[int]):
    ladder = [int(n) for n in ladder]
    if len(ladder) < 2:
        raise ValueError("refinement ladder needs at least two entries")
    for a, b in zip(ladder, ladder[1:]):
        if b <= a or b % a:
            raise ValueError(f"ladder {ladder} is not nested (each n must divide the next)")
    return ladder


def _transfer(res: SolveResult, spec_coarse: CellProblemSpec, k: int):
    """Prolong a coarse minimiser onto the grid of the ``k``-times finer problem."""
    fine = prolong(res.minimizer, k)
    w = spec_coarse.collar
    off = w * (k - 1)
    n_fine = spec_coarse.n * k + 2 * w
    N = fine.grid.N
    idx = np.indices((n_fine,) * N).reshape(N, -1) + off
    src = np.ravel_multi_index(tuple(idx), fine.grid.shape)
    coarse = res.minimizer.grid
    zeros = np.zeros((coarse.ncells, coarse.d))
    extras = tuple(prolong(DiscreteSBVField(coarse, zeros, U), k).gradients[src] for U in res.extras)
    return fine.values[src], fine.gradients[src], extras


def refine_ladder(spec: CellProblemSpec, ladder: Sequence[int]) -> SolveResult:
    """Solve on nested grids, warm-starting each level from the previous one.

    Returns the finest result with ``history = [(n, value), ...]`` and the
    last-step decrement in ``diagnostics["last_decrement"]``.
    """
    if spec.kind == "dirichlet-general":
        raise ValueError("refinement ladders apply to cell problems")
    ladder = _check_nested(ladder)
    history = []
    prev, prev_spec = None, None
    res = None
    for n in ladder:
        s = spec.with_(n=n)
        warm = () if prev is None else (_transfer(prev, prev_spec, n // prev_spec.n),)
        res = solve(s, warm)
        history.append((n, res.value))
        prev, prev_spec = res, s
    res.history = history
    res.diagnostics["last_decrement"] = history[-2][1] - history[-1][1]
    res.diagnostics["monotone"] = all(b <= a + 1e-9 for (_, a), (_, b) in zip(history, history[1:]))
    return res


@dataclass
class BlowupResult:
    eps: list
    values: list
    ratios: list
    estimate: float
    spread: float
    results: list

    def rows(self, kind: str, seed: int, n: int) -> list[dict]:
        return [{"kind": kind, "eps": e, "n": n, "value": v, "ratio": r, "seed": seed}
                for e, v, r in zip(self.eps, self.values, self.ratios)]


def _check_ladder(eps):
    eps = [float(e) for e in eps]
    if len(eps) < 3:
        raise ValueError("epsilon ladder needs at least 3 entries")
    if any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilon ladder must be positive and decreasing")
    return eps


def _check_inside(x0, eps, domain, N):
    if domain is None:
        return
    center, side = domain
    center = np.atleast_1d(np.asarray(center, dtype=float))
    # a rotated cube of side eps fits in the ball of radius eps*sqrt(N)/2
    reach = eps * math.sqrt(N) / 2
    if np.any(np.abs(x0 - center) + reach > side / 2 + 1e-12):
        raise ValueError(f"cube of side {eps} at {x0.tolist()} exits the domain")


def _tail_max(vals):
    k = max(2, (len(vals) + 1) // 2)
    tail = vals[-k:]
    return float(max(tail)), float(max(tail) - min(tail))


def blowup_bulk(W: BulkDensity, psi: SurfaceDensity, x0, a, xi, B, eps_ladder, n: int = 8,
                domain=None, budget: SolverBudget = SolverBudget(), seed: int = 0,
                collar: int = 1) -> BlowupResult:
    """Ratios ``m(a + xi (. - x0), B; Q(x0, eps)) / eps**N`` along the ladder."""
    eps_ladder = _check_ladder(eps_ladder)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    Bs = [B] if np.ndim(B) <= 2 else list(B)
    if len(Bs) != 1:
        raise ValueError("bulk blow-ups with the plain energy take one mean target")
    vals, ratios, results = [], [], []
    for eps in eps_ladder:
        _check_inside(x0, eps, domain, W.N)
        spec = CellProblemSpec("bulk", W, psi, A=xi, B=Bs, a=a, n=n, x0=x0, side=eps,
                               collar=collar, budget=budget, seed=seed, frozen=False)
        r = solve_bulk_cell(spec)
        vals.append(r.value)
        ratios.append(r.value / eps ** W.N)
        results.append(r)
    est, spread = _tail_max(ratios)
    return BlowupResult(eps_ladder, vals, ratios, est, spread, results)


def blowup_surface(W: BulkDensity, psi: SurfaceDensity, x0, lam, theta, nu, eps_ladder,
                   n: int = 8, domain=None, budget: SolverBudget = SolverBudget(),
                   seed: int = 0, collar: int = 1) -> BlowupResult:
    """Ratios ``m(v_{lam,theta,nu}(. - x0), 0; Q_nu(x0, eps)) / eps**(N-1)``.

    The datum is used as given (no translation normalisation) and the
    gradients are free with mean zero.
    """
    eps_ladder = _check_ladder(eps_ladder)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    N, d = W.N, W.d
    vals, ratios, results = [], [], []
    for eps in eps_ladder:
        _check_inside(x0, eps, domain, N)
        spec = CellProblemSpec("surface", W, psi, lam=lam, theta=theta, nu=nu, n=n, x0=x0,
                               side=eps, collar=collar, budget=budget, seed=seed,
                               frozen=False, normalize=False)
        grid, region = _cell_geometry(spec)
        datum = jump_datum(grid, spec.lam, np.zeros(d) if spec.theta is None else spec.theta)
        bulk = _bulk_callable(W, grid)
        surface = _surface_callable(psi, grid)
        problem = MaskedProblem(grid, datum, region, bulk, surface,
                                grad_mean=np.zeros((d, N)),
                                exact_ok=_exact_ok(W, psi, frozen=False))
        if spec.theta is not None and np.array_equal(spec.lam, spec.theta):
            r = _trivial(grid, region, datum, problem.model().of(datum), "surface", "lambda == theta")
        else:
            r = _wrap(solve_masked(problem, budget, seed), grid, region, "surface")
        area = eps ** (N - 1)
        _attach_sandwich(r, W, psi, x0, eps ** N, 0.0,
                         float(np.linalg.norm(spec.lam - (0 if spec.theta is None else spec.theta))) * area)
        vals.append(r.value)
        ratios.append(r.value / area)
        results.append(r)
    est, spread = _tail_max(ratios)
    return BlowupResult(eps_ladder, vals, ratios, est, spread, results)


# -------------------------------------------------------------------- CSV

RESULT_COLUMNS = ("kind", "n", "eps", "value", "seed")


def result_rows(spec: CellProblemSpec, res: SolveResult) -> list[dict]:
    """One row per refinement level (or a single row)."""
    history = res.history or [(spec.n, res.value)]
    return [{"kind": spec.kind, "n": n, "eps": spec.side, "value": v, "seed": spec.seed}
            for n, v in history]


def rows_to_csv(rows: list[dict], columns: Sequence[str], extra: Optional[dict] = None) -> str:
    """Deterministic CSV text; floats are written with ``repr``."""
    buf = io.StringIO()
    cols = list(columns) + (list(extra) if extra else [])
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in rows:
        full = dict(row)
        if extra:
            full.update(extra)
        writer.writerow([_fmt(full.get(c)) for c in cols])
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return json.dumps(np.asarray(v).tolist())
    return str(v)

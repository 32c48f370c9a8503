"""Bulk and surface energy densities.

A bulk density ``W(x, A)`` is evaluated on points ``x`` of shape ``(..., N)``
and matrices ``A`` of shape ``(..., d, N)``; a surface density
``psi(x, lam, nu)`` on jump vectors ``lam`` of shape ``(..., d)`` and unit
normals ``nu`` of shape ``(..., N)``.  Evaluators must broadcast over the
leading batch axes; the solvers rely on that for speed.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "BulkDensity",
    "SurfaceDensity",
    "RecessionEstimate",
    "RecessionUndefined",
    "DimensionError",
    "eval_bulk",
    "eval_surface",
    "recession_estimate",
    "frozen_bulk",
    "frozen_surface",
]

UNIT_NORMAL_TOL = 1e-12


class DimensionError(ValueError):
    pass


class RecessionUndefined(ValueError):
    """Raised when ``W(x, tA)/t`` diverges along the ladder."""


@dataclass(frozen=True)
class BulkDensity:
    """Bulk energy density with its declared structural constants.

    ``convex`` declares convexity in the matrix argument and
    ``homogeneous`` declares that ``W`` does not depend on ``x``; both are
    used only to select the closed-form solver path.
    """

    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    N: int
    d: int
    p: float
    lipschitz_const: float
    coercivity_const: float
    reference_matrix: Optional[np.ndarray] = None
    modulus: Optional[Callable[[np.ndarray], np.ndarray]] = None
    recession: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    w3_params: Optional[tuple[float, float, float]] = None
    convex: bool = False
    homogeneous: bool = False
    name: str = ""
    source: str = ""

    def __post_init__(self):
        if self.p < 1:
            raise ValueError(f"growth exponent must be >= 1, got {self.p}")
        if self.coercivity_const <= 0:
            raise ValueError("coercivity constant must be positive")
        if self.lipschitz_const < 0:
            raise ValueError("Lipschitz constant must be nonnegative")
        if self.w3_params is not None:
            C, L, alpha = self.w3_params
            if not (C > 0 and L > 0 and 0 < alpha < 1):
                raise ValueError("w3_params need C, L > 0 and 0 < alpha < 1")
        if self.reference_matrix is None:
            object.__setattr__(self, "reference_matrix", np.zeros((self.d, self.N)))

    def __call__(self, x, A):
        x = np.asarray(x, dtype=float)
        A = np.asarray(A, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], A.shape[:-2])
        return np.broadcast_to(np.asarray(self.func(x, A), dtype=float), batch)

    def with_(self, **changes) -> "BulkDensity":
        return replace(self, **changes)


@dataclass(frozen=True)
class SurfaceDensity:
    """Surface energy density with declared growth constants.

    ``jump_scale = c`` declares ``psi = c|lam|`` exactly, and ``subadditive``
    declares positive 1-homogeneity plus subadditivity in ``lam``.
    """

    func: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    N: int
    d: int
    lower_const: float
    upper_const: float
    modulus: Optional[Callable[[np.ndarray], np.ndarray]] = None
    jump_scale: Optional[float] = None
    subadditive: bool = False
    homogeneous: bool = False
    name: str = ""
    source: str = ""

    def __post_init__(self):
        if self.lower_const <= 0 or self.upper_const <= 0:
            raise ValueError("surface growth constants must be positive")
        if self.jump_scale is not None:
            object.__setattr__(self, "subadditive", True)

    def __call__(self, x, lam, nu):
        x = np.asarray(x, dtype=float)
        lam = np.asarray(lam, dtype=float)
        nu = np.asarray(nu, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], lam.shape[:-1], nu.shape[:-1])
        return np.broadcast_to(np.asarray(self.func(x, lam, nu), dtype=float), batch)

    def with_(self, **changes) -> "SurfaceDensity":
        return replace(self, **changes)


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")


def eval_bulk(W: BulkDensity, x, A) -> float:
    """Evaluate ``W(x, A)`` at a single point."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    A = np.asarray(A, dtype=float)
    if A.ndim == 1 and W.N == 1:
        A = A.reshape(W.d, 1)
    if A.ndim == 0:
        A = A.reshape(1, 1)
    if x.shape != (W.N,):
        raise DimensionError(f"x must have shape ({W.N},), got {x.shape}")
    if A.shape != (W.d, W.N):
        raise DimensionError(f"A must have shape ({W.d}, {W.N}), got {A.shape}")
    _check_finite("x", x)
    _check_finite("A", A)
    return float(W(x, A))


def eval_surface(psi: SurfaceDensity, x, lam, nu) -> float:
    """Evaluate ``psi(x, lam, nu)``; ``nu`` must be a unit vector."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    if x.shape != (psi.N,) or nu.shape != (psi.N,):
        raise DimensionError(f"x and nu must have shape ({psi.N},)")
    if lam.shape != (psi.d,):
        raise DimensionError(f"lambda must have shape ({psi.d},), got {lam.shape}")
    for name, arr in (("x", x), ("lambda", lam), ("nu", nu)):
        _check_finite(name, arr)
    if abs(np.linalg.norm(nu) - 1.0) > UNIT_NORMAL_TOL:
        raise ValueError(f"nu must be a unit vector, |nu| = {np.linalg.norm(nu)!r}")
    return float(psi(x, lam, nu))


@dataclass(frozen=True)
class RecessionEstimate:
    value: float
    spread: float
    ladder: tuple[float, ...]
    ratios: tuple[float, ...]
    exact: bool = False
    certified_bound: Optional[float] = None
    ladder_agreement: Optional[float] = None

    @property
    def error(self) -> float:
        """Best available error bound for ``value``."""
        if self.exact:
            return 0.0
        if self.certified_bound is not None:
            return min(self.spread, self.certified_bound) if self.spread > 0 else self.certified_bound
        return self.spread


def _tail(seq: Sequence[float]) -> Sequence[float]:
    k = max(2, (len(seq) + 1) // 2)
    return seq[-k:]


def recession_estimate(
    W: BulkDensity,
    x,
    A,
    ladder: Sequence[float] = (1e1, 1e2, 1e3, 1e4),
) -> RecessionEstimate:
    """Estimate ``W^inf(x, A) = limsup_t W(x, tA)/t`` along a geometric ladder.

    ``A`` need not be normalised: the estimate is computed for ``A/|A|`` and
    scaled back, using positive 1-homogeneity of the recession function.
    The tail is the upper half of the ladder (at least two entries).
    """
    ladder = tuple(float(t) for t in ladder)
    if len(ladder) < 3:
        raise ValueError("recession ladder needs at least 3 entries")
    if any(t <= 0 for t in ladder) or any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError("recession ladder must be positive and increasing")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    A = np.asarray(A, dtype=float).reshape(W.d, W.N)
    norm = float(np.linalg.norm(A))
    if norm == 0.0:
        return RecessionEstimate(0.0, 0.0, ladder, tuple(0.0 for _ in ladder), exact=True)
    unit = A / norm
    if W.w3_params is not None and ladder[0] <= W.w3_params[1]:
        raise ValueError(f"ladder entries must exceed L = {W.w3_params[1]}")

    ts = np.array(ladder)
    ratios = np.asarray(W(np.broadcast_to(x, (len(ts), W.N)), ts[:, None, None] * unit)) / ts
    tail = _tail(ratios)
    # ratios growing like a positive power of t: no finite recession function
    slope = np.polyfit(np.log(ts[-len(tail):]), np.log(np.maximum(np.abs(tail), 1e-300)), 1)[0]
    if slope > 0.5 and tail[-1] > 2.0 * tail[0]:
        raise RecessionUndefined(
            f"W(x,tA)/t grows like t^{slope:.2f}; recession undefined/infinite direction"
        )
    value = float(np.max(tail))
    spread = float(np.max(tail) - np.min(tail))
    bound = None
    if W.w3_params is not None:
        C, _, alpha = W.w3_params
        bound = C / ts[-len(tail)] ** alpha
    if W.recession is not None:
        exact_value = float(W.recession(x, unit))
        return RecessionEstimate(
            norm * exact_value,
            norm * spread,
            ladder,
            tuple(ratios * norm),
            exact=True,
            certified_bound=None if bound is None else norm * bound,
            ladder_agreement=norm * abs(exact_value - value),
        )
    return RecessionEstimate(
        norm * value,
        norm * spread,
        ladder,
        tuple(ratios * norm),
        certified_bound=None if bound is None else norm * bound,
    )


def recession_density(W: BulkDensity, ladder: Sequence[float] = (1e3, 1e4, 1e5, 1e6)):
    """Vectorised evaluator of ``W^inf``.

    Uses the declared closed form when present, otherwise ``|A|`` times the
    maximum of ``W(x, tA/|A|)/t`` over the tail of ``ladder`` (so the estimate
    is positively 1-homogeneous and vanishes at 0).  Returns
    ``(func, error)`` where ``error(x, A)`` is the tail spread.
    """
    if W.recession is not None:
        return W.recession, (lambda x, A: np.zeros(np.broadcast_shapes(
            np.shape(x)[:-1], np.shape(A)[:-2])))
    ts = np.asarray(_tail(tuple(float(t) for t in ladder)))

    def ratios(x, A):
        x = np.asarray(x, dtype=float)
        A = np.asarray(A, dtype=float)
        norm = frobenius(A)
        unit = A / np.where(norm > 0, norm, 1.0)[..., None, None]
        return np.stack([np.asarray(W(x, t * unit)) / t * norm for t in ts])

    def func(x, A):
        return ratios(x, A).max(axis=0)

    def error(x, A):
        r = ratios(x, A)
        return r.max(axis=0) - r.min(axis=0)

    return func, error


def frozen_bulk(W: BulkDensity, x0) -> Callable:
    """``(x, A) -> W(x0, A)``, the density frozen at ``x0``."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))

    def func(x, A):
        A = np.asarray(A, dtype=float)
        return W(np.broadcast_to(x0, A.shape[:-2] + (W.N,)), A)

    return func


def frozen_surface(psi: SurfaceDensity, x0) -> Callable:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))

    def func(x, lam, nu):
        lam = np.asarray(lam, dtype=float)
        nu = np.asarray(nu, dtype=float)
        batch = np.broadcast_shapes(lam.shape[:-1], nu.shape[:-1])
        return psi(np.broadcast_to(x0, batch + (psi.N,)), lam, nu)

    return func


def frobenius(A: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.asarray(A) ** 2, axis=(-2, -1)))


def zero_modulus(s):
    return np.zeros_like(np.asarray(s, dtype=float))

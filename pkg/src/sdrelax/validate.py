"""Sample-based checks of the structural hypotheses on densities.

Verdicts mean "no violation found among the samples", never a proof.
Samples come from a scrambled Halton sequence, so a report is reproducible
from ``(density, n_samples, seed)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import qmc

from .densities import BulkDensity, SurfaceDensity, frobenius, recession_density

__all__ = ["ValidationReport", "validate_bulk", "validate_surface", "Sampler"]

PASS, FAIL, SKIPPED = "pass", "fail", "skipped"


@dataclass
class ValidationReport:
    verdicts: dict[str, str]
    witnesses: dict[str, Optional[dict]]
    worst_ratio: dict[str, float]
    n_samples: int
    seed: int
    tol: float
    kind: str = ""
    name: str = ""

    def passed(self, hypothesis: str) -> bool:
        return self.verdicts[hypothesis] == PASS

    def failed(self) -> list[str]:
        return [k for k, v in self.verdicts.items() if v == FAIL]

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (np.floating, np.integer)):
                v = v.item()
            if isinstance(v, float) and np.isnan(v):
                return None
            return v

        return clean({
            "kind": self.kind,
            "name": self.name,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "tol": self.tol,
            "verdicts": self.verdicts,
            "worst_ratio": self.worst_ratio,
            "witnesses": self.witnesses,
        })


@dataclass
class Sampler:
    """Box from which inputs are drawn.

    Matrices and jump vectors get entries in ``[-radius, radius]``; half the
    samples are rescaled by a log-uniform factor in ``[1e-3, 1]`` so that
    both small and large arguments are exercised.
    """

    seed: int = 0
    radius: float = 10.0
    x_lo: float = -0.5
    x_hi: float = 0.5
    t_max: float = 10.0

    def uniform(self, n: int, dim: int, stream: int) -> np.ndarray:
        # one independent scrambled sequence per stream keeps checks decoupled
        eng = qmc.Halton(d=dim, scramble=True, seed=np.random.default_rng([self.seed, stream]))
        return eng.random(n)

    def points(self, n, N, stream):
        return self.x_lo + (self.x_hi - self.x_lo) * self.uniform(n, N, stream)

    def arrays(self, n, shape, stream):
        dim = int(np.prod(shape))
        u = self.uniform(n, dim + 1, stream)
        vals = self.radius * (2.0 * u[:, :dim] - 1.0)
        scale = np.where(np.arange(n) % 2 == 0, 1.0, 10.0 ** (-3.0 * u[:, dim]))
        return (vals * scale[:, None]).reshape((n,) + tuple(shape))

    def normals(self, n, N, stream):
        u = self.uniform(n, 1, stream)[:, 0]
        if N == 1:
            return np.where(u < 0.5, -1.0, 1.0)[:, None]
        if N == 2:
            ang = 2 * np.pi * u
            return np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        g = self.uniform(n, N, stream + 1000) - 0.5
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    def scalars(self, n, lo, hi, stream):
        return lo + (hi - lo) * self.uniform(n, 1, stream)[:, 0]


def _judge(lhs, rhs, tol, inputs: dict, scale=None):
    """Verdict for the sampled inequality ``lhs <= rhs``.

    The tolerance is relative to ``scale`` (default ``1 + |rhs|``).
    """
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    scale = 1.0 + np.abs(rhs) if scale is None else np.asarray(scale, dtype=float)
    excess = (lhs - rhs) / scale
    bad = ~np.isfinite(lhs) | (excess > tol)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0),
                         np.where(lhs > 0, np.inf, 0.0))
    key = np.where(np.isfinite(excess), excess, np.inf)
    i = int(np.argmax(key))
    witness = {k: np.asarray(v)[i] for k, v in inputs.items()}
    witness.update(lhs=float(lhs[i]), rhs=float(rhs[i]), excess=float(excess[i]))
    verdict = FAIL if bad.any() else PASS
    return verdict, witness, float(np.nanmax(ratio)) if ratio.size else 0.0


def _collect(report_parts):
    verdicts, witnesses, ratios = {}, {}, {}
    for name, part in report_parts.items():
        if part is None:
            verdicts[name], witnesses[name], ratios[name] = SKIPPED, None, float("nan")
        else:
            verdicts[name], witnesses[name], ratios[name] = part
    return verdicts, witnesses, ratios


def validate_bulk(
    W: BulkDensity,
    sampler: Sampler | int = 0,
    n_samples: int = 10_000,
    tol: float = 1e-9,
) -> ValidationReport:
    """Check nonnegativity, (W1*), (W4), (W5) and, when declared, (W2), (W3)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    s = sampler if isinstance(sampler, Sampler) else Sampler(seed=int(sampler))
    n, N, d, p = n_samples, W.N, W.d, W.p
    shape = (d, N)
    x = s.points(n, N, 1)
    A1 = s.arrays(n, shape, 2)
    A2 = np.where((np.arange(n) % 4 < 2)[:, None, None],
                  s.arrays(n, shape, 3),
                  A1 + 1e-2 * s.arrays(n, shape, 4) / s.radius)
    w1 = W(x, A1)
    w2 = W(x, A2)
    n1, n2 = frobenius(A1), frobenius(A2)
    parts = {}
    parts["nonneg"] = _judge(-w1, np.zeros(n), tol, {"x": x, "A": A1})
    lip_rhs = W.lipschitz_const * frobenius(A1 - A2) * (1 + n1 ** (p - 1) + n2 ** (p - 1))
    parts["W1*"] = _judge(np.abs(w1 - w2), lip_rhs, tol, {"x": x, "A1": A1, "A2": A2})
    w_ref = W(x, np.broadcast_to(W.reference_matrix, (n,) + shape))
    finite = np.isfinite(w_ref)
    parts["W4"] = (
        PASS if finite.all() else FAIL,
        {"x": x[int(np.argmax(np.where(finite, w_ref, np.inf)))],
         "max W(x, A0)": float(np.max(np.where(finite, w_ref, np.inf)))},
        float(np.max(np.where(finite, w_ref, np.inf))),
    )
    c = W.coercivity_const
    parts["W5"] = _judge(c * n1 ** p - 1.0 / c, w1, tol, {"x": x, "A": A1})
    if W.modulus is not None:
        x2 = s.points(n, N, 5)
        lhs = np.abs(W(x2, A1) - w1)
        rhs = np.asarray(W.modulus(np.linalg.norm(x2 - x, axis=-1))) * (1 + n1 ** p)
        parts["W2"] = _judge(lhs, rhs, tol, {"x0": x, "x1": x2, "A": A1})
    else:
        parts["W2"] = None
    if p == 1 and W.w3_params is not None:
        C, L, alpha = W.w3_params
        unit = A1 / np.maximum(n1, 1e-300)[:, None, None]
        t = L * (1.0 + 1e3 ** s.scalars(n, 0.0, 1.0, 6))
        rec, _ = recession_density(W)
        lhs = np.abs(rec(x, unit) - W(x, t[:, None, None] * unit) / t)
        parts["W3"] = _judge(lhs, C / t ** alpha, tol, {"x": x, "A": unit, "t": t})
    else:
        parts["W3"] = None
    verdicts, witnesses, ratios = _collect(parts)
    return ValidationReport(verdicts, witnesses, ratios, n, s.seed, tol, "bulk", W.name)


def validate_surface(
    psi: SurfaceDensity,
    sampler: Sampler | int = 0,
    n_samples: int = 10_000,
    tol: float = 1e-9,
) -> ValidationReport:
    """Check nonnegativity and (psi1)-(psi4), plus (psi5) when a modulus is declared."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    s = sampler if isinstance(sampler, Sampler) else Sampler(seed=int(sampler))
    n, N, d = n_samples, psi.N, psi.d
    x = s.points(n, N, 11)
    lam = s.arrays(n, (d,), 12)
    lam2 = s.arrays(n, (d,), 13)
    nu = s.normals(n, N, 14)
    t = s.scalars(n, 1e-3, s.t_max, 15)
    v = psi(x, lam, nu)
    nl = np.linalg.norm(lam, axis=-1)
    parts = {}
    parts["nonneg"] = _judge(-v, np.zeros(n), tol, {"x": x, "lambda": lam, "nu": nu})
    parts["psi1"] = _judge(np.abs(v - psi(x, -lam, -nu)), np.zeros(n), tol,
                           {"x": x, "lambda": lam, "nu": nu}, scale=1.0 + np.abs(v))
    low = _judge(psi.lower_const * nl, v, tol, {"x": x, "lambda": lam, "nu": nu})
    up = _judge(v, psi.upper_const * nl, tol, {"x": x, "lambda": lam, "nu": nu})
    parts["psi2_lower"], parts["psi2_upper"] = low, up
    worse = low if low[0] == FAIL or up[0] != FAIL else up
    parts["psi2"] = (FAIL if FAIL in (low[0], up[0]) else PASS, worse[1], max(low[2], up[2]))
    scaled = psi(x, t[:, None] * lam, nu)
    parts["psi3"] = _judge(np.abs(scaled - t * v), np.zeros(n), tol,
                           {"x": x, "lambda": lam, "nu": nu, "t": t},
                           scale=1.0 + np.abs(t * v))
    parts["psi4"] = _judge(psi(x, lam + lam2, nu), v + psi(x, lam2, nu), tol,
                           {"x": x, "lambda1": lam, "lambda2": lam2, "nu": nu})
    if psi.modulus is not None:
        x2 = s.points(n, N, 16)
        lhs = np.abs(psi(x2, lam, nu) - v)
        rhs = np.asarray(psi.modulus(np.linalg.norm(x2 - x, axis=-1))) * nl
        parts["psi5"] = _judge(lhs, rhs, tol, {"x0": x, "x1": x2, "lambda": lam, "nu": nu})
    else:
        parts["psi5"] = None
    verdicts, witnesses, ratios = _collect(parts)
    return ValidationReport(verdicts, witnesses, ratios, n, s.seed, tol, "surface", psi.name)

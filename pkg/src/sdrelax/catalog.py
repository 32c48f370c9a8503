"""Built-in densities and the DSL-backed density wrapper."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import dsl
from .densities import BulkDensity, SurfaceDensity, frobenius, zero_modulus

__all__ = [
    "CatalogEntry",
    "CATALOG",
    "list_catalog",
    "get_density",
    "parse_density",
]


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    kind: str  # "bulk" or "surface"
    text: str
    constants: dict
    closed_form: Callable


def _norm_vec(v):
    return np.sqrt(np.sum(np.asarray(v) ** 2, axis=-1))


CATALOG: dict[str, CatalogEntry] = {
    e.name: e
    for e in [
        CatalogEntry(
            "quadratic", "bulk", "normsq(A)",
            dict(p=2.0, lipschitz_const=2.0, coercivity_const=0.5, convex=True),
            lambda x, A: np.sum(np.asarray(A) ** 2, axis=(-2, -1)),
        ),
        CatalogEntry(
            "p-power", "bulk", "norm(A)^3",
            dict(p=3.0, lipschitz_const=2.0, coercivity_const=0.5, convex=True),
            lambda x, A: frobenius(A) ** 3,
        ),
        CatalogEntry(
            "perturbed-linear", "bulk", "sqrt(1 + normsq(A))",
            dict(p=1.0, lipschitz_const=1.0, coercivity_const=1.0, convex=True,
                 w3_params=(1.0, 1.0, 0.5)),
            lambda x, A: np.sqrt(1.0 + frobenius(A) ** 2),
        ),
        CatalogEntry(
            "linear", "bulk", "norm(A)",
            dict(p=1.0, lipschitz_const=1.0, coercivity_const=1.0, convex=True,
                 w3_params=(1.0, 1.0, 0.5)),
            lambda x, A: frobenius(A),
        ),
        CatalogEntry(
            "norm-jump", "surface", "norm(lambda)",
            dict(lower_const=1.0, upper_const=1.0, jump_scale=1.0),
            lambda x, lam, nu: _norm_vec(lam),
        ),
        CatalogEntry(
            "anisotropic", "surface", "abs(dot(lambda, nu))",
            dict(lower_const=1.0, upper_const=1.0, subadditive=True),
            lambda x, lam, nu: np.abs(np.sum(np.asarray(lam) * np.asarray(nu), axis=-1)),
        ),
        CatalogEntry(
            "scaled-jump", "surface", "2 * norm(lambda)",
            dict(lower_const=2.0, upper_const=2.0, jump_scale=2.0),
            lambda x, lam, nu: 2.0 * _norm_vec(lam),
        ),
    ]
}

_RECESSION = {"perturbed-linear": lambda x, A: frobenius(A), "linear": lambda x, A: frobenius(A)}


def list_catalog() -> list[dict]:
    """Names, DSL formulas and declared constants of the built-in densities."""
    rows = []
    for e in CATALOG.values():
        consts = {k: (list(v) if isinstance(v, tuple) else v) for k, v in e.constants.items()}
        rows.append({"name": e.name, "kind": e.kind, "formula": e.text, **consts})
    return rows


def get_density(name: str, N: int = 1, d: int = 1):
    """Instantiate a catalog density for dimensions ``(N, d)``."""
    try:
        e = CATALOG[name]
    except KeyError:
        raise KeyError(f"unknown catalog density {name!r}; known: {sorted(CATALOG)}") from None
    if e.kind == "bulk":
        return BulkDensity(
            e.closed_form, N=N, d=d, modulus=zero_modulus, homogeneous=True,
            recession=_RECESSION.get(name), name=name, source=e.text, **e.constants,
        )
    if name == "anisotropic" and d != N:
        raise ValueError("the anisotropic density needs d == N")
    return SurfaceDensity(
        e.closed_form, N=N, d=d, modulus=zero_modulus, homogeneous=True,
        name=name, source=e.text, **e.constants,
    )


def parse_density(text: str, kind: str, N: int = 1, d: int = 1, **constants):
    """Parse DSL ``text`` and wrap it as a density of the given ``kind``.

    Returns ``(ast, density)``.  Declared constants are passed through as
    keyword arguments (``p``, ``lipschitz_const``, ``lower_const`` ...);
    missing ones default to 1.  A density whose formula does not mention
    ``x`` is marked homogeneous.
    """
    if kind == "bulk":
        node = dsl.parse(text, allowed={"A", "x"})
    elif kind == "surface":
        node = dsl.parse(text, allowed={"lambda", "nu", "x"})
    else:
        raise ValueError(f"kind must be 'bulk' or 'surface', got {kind!r}")
    homogeneous = "x" not in dsl.variables(node)
    if kind == "bulk":
        def func(x, A):
            return dsl.evaluate(node, A=A, x=x)

        consts = dict(p=1.0, lipschitz_const=1.0, coercivity_const=1.0)
        consts.update(constants)
        if homogeneous:
            consts.setdefault("modulus", zero_modulus)
        return node, BulkDensity(func, N=N, d=d, homogeneous=homogeneous,
                                 source=text, **consts)

    def sfunc(x, lam, nu):
        return dsl.evaluate(node, x=x, nu=nu, **{"lambda": lam})

    consts = dict(lower_const=1.0, upper_const=1.0)
    consts.update(constants)
    if homogeneous:
        consts.setdefault("modulus", zero_modulus)
    return node, SurfaceDensity(sfunc, N=N, d=d, homogeneous=homogeneous,
                                source=text, **consts)


def resolve_density(spec, kind: str, N: int, d: int):
    """Catalog name, DSL text, or ``{"expr": ..., constants...}`` mapping."""
    if isinstance(spec, (BulkDensity, SurfaceDensity)):
        return spec
    if isinstance(spec, str):
        if spec in CATALOG:
            return get_density(spec, N=N, d=d)
        return parse_density(spec, kind, N=N, d=d)[1]
    if isinstance(spec, dict):
        spec = dict(spec)
        if "catalog" in spec:
            base = get_density(spec.pop("catalog"), N=N, d=d)
            return base.with_(**spec) if spec else base
        text = spec.pop("expr")
        if "w3_params" in spec and spec["w3_params"] is not None:
            spec["w3_params"] = tuple(spec["w3_params"])
        return parse_density(text, kind, N=N, d=d, **spec)[1]
    raise TypeError(f"cannot interpret density spec {spec!r}")

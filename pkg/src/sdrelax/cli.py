"""Batch driver: ``sdrelax <command> --config <path> [--seed K] [--out DIR]``.

Exit codes: 0 ok, 2 configuration error, 3 numerical failure.
Output directory precedence: ``--out``, then ``SDRELAX_OUT``, then the
config key ``out``, then ``./sdrelax-out``.  ``SDRELAX_WORKERS`` sets the
number of worker threads.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy

from . import __version__
from .approx import (
    MultiLevelDeformation,
    StructuredDeformation,
    build_determining_sequence,
    multilevel_family,
    verify_hsd_convergence,
)
from .catalog import list_catalog, resolve_density
from .cell import (
    CellProblemSpec,
    blowup_bulk,
    blowup_surface,
    jump_datum,
    refine_ladder,
    rows_to_csv,
    solve,
    solve_dirichlet,
)
from .multilevel import compare, relax_direct, relax_iterated
from .sbv import CubeGrid, affine_field, field_from_json, l1_distance, prolong
from .solver import SolverBudget
from .validate import validate_bulk, validate_surface

__all__ = ["main", "run_config", "ConfigError", "COMMANDS"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _require(cfg: dict, key: str, where: str = "config"):
    if key not in cfg:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return cfg[key]


def _dims(cfg: dict) -> tuple[int, int]:
    N = int(cfg.get("N", 1))
    d = int(cfg.get("d", 1))
    if N not in (1, 2) or d < 1:
        raise ConfigError(f"config: unsupported dimensions N={N}, d={d}")
    return N, d


def _densities(cfg: dict, N: int, d: int):
    try:
        W = resolve_density(_require(cfg, "W"), "bulk", N, d)
        psi = resolve_density(_require(cfg, "psi"), "surface", N, d)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"config: bad density specification: {exc}") from exc
    return W, psi


def _budget(cfg: dict) -> SolverBudget:
    try:
        return SolverBudget(**cfg.get("budget", {}))
    except TypeError as exc:
        raise ConfigError(f"config: bad budget: {exc}") from exc


def _grid(cfg: dict, N: int, d: int) -> CubeGrid:
    gcfg = cfg.get("grid", {})
    try:
        return CubeGrid(N, d, int(gcfg.get("n", 16)), center=gcfg.get("center"),
                        side=float(gcfg.get("side", 1.0)), nu=gcfg.get("nu"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config.grid: {exc}") from exc


def _field(spec, grid: CubeGrid, where: str):
    """``{"affine": {"A", "a"}}``, ``{"jump": {"lambda", "theta"}}`` or a
    serialized field under ``{"field": ...}``."""
    if not isinstance(spec, dict) or len(spec) != 1:
        raise ConfigError(f"{where}: expected one of 'affine', 'jump', 'field'")
    (kind, body), = spec.items()
    if kind == "affine":
        return affine_field(grid, _require(body, "A", where), body.get("a"), body.get("x0"))
    if kind == "jump":
        return jump_datum(grid, _require(body, "lambda", where), body.get("theta"))
    if kind == "field":
        f = field_from_json(json.dumps(body))
        if f.grid != grid:
            if f.grid.n < grid.n and grid.n % f.grid.n == 0:
                f = prolong(f, grid.n // f.grid.n)
            else:
                raise ConfigError(f"{where}: field grid does not match config.grid")
        return f
    raise ConfigError(f"{where}: unknown field kind {kind!r}")


def config_hash(cfg: dict, seed: int) -> str:
    text = json.dumps({"config": cfg, "seed": seed}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("SDRELAX_WORKERS", "1")))
    except ValueError:
        raise ConfigError("SDRELAX_WORKERS must be an integer") from None


def _map(fn: Callable, items: list) -> list:
    """Ordered map over independent jobs, optionally threaded."""
    workers = _workers()
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ----------------------------------------------------------------- commands
# Each builder validates the config and returns a zero-argument job; the job
# returns (rows, columns, json_payload).

def _cell_spec(cfg, kind, seed):
    N, d = _dims(cfg)
    W, psi = _densities(cfg, N, d)
    try:
        common = dict(p=cfg.get("p"), n=int(cfg.get("n", 8)), x0=cfg.get("x0"),
                      side=float(cfg.get("side", 1.0)), collar=int(cfg.get("collar", 1)),
                      budget=_budget(cfg), seed=seed, nu=cfg.get("nu"))
        if kind == "bulk":
            return CellProblemSpec("bulk", W, psi, A=_require(cfg, "A"), B=[_require(cfg, "B")],
                                   a=cfg.get("a"), **common)
        return CellProblemSpec("surface", W, psi, lam=_require(cfg, "lambda"),
                               theta=cfg.get("theta"), normalize=bool(cfg.get("normalize", True)),
                               **common)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from exc


def _ladder(cfg, spec):
    ladder = cfg.get("ladder")
    if ladder is None:
        return None
    ladder = [int(n) for n in ladder]
    if len(ladder) < 2 or any(b <= a or b % a for a, b in zip(ladder, ladder[1:])):
        raise ConfigError(f"config.ladder: {ladder} is not nested (each n must divide the next)")
    return ladder


CELL_COLUMNS = ("kind", "n", "eps", "value", "certified", "gap", "seed")


def _cmd_relax(kind):
    def build(cfg, seed):
        spec = _cell_spec(cfg, kind, seed)
        ladder = _ladder(cfg, spec)

        def job():
            res = refine_ladder(spec, ladder) if ladder else solve(spec)
            history = res.history or [(spec.n, res.value)]
            rows = [{"kind": kind, "n": n, "eps": spec.side, "value": v,
                     "certified": res.certified, "gap": res.diagnostics["gap"], "seed": seed}
                    for n, v in history]
            return rows, CELL_COLUMNS, {"spec": spec.to_dict(), "result": res.to_dict()}

        return job
    return build


def _cmd_dirichlet(cfg, seed):
    N, d = _dims(cfg)
    W, psi = _densities(cfg, N, d)
    grid = _grid(cfg, N, d)
    g = _field(_require(cfg, "g"), grid, "config.g")
    region = _require(cfg, "region")
    try:
        spec = CellProblemSpec("dirichlet-general", W, psi, g=g,
                               region=(tuple(region[0]), tuple(region[1])),
                               B=[_require(cfg, "B")], collar=int(cfg.get("collar", 1)),
                               budget=_budget(cfg), seed=seed)
    except (TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"config: {exc}") from exc

    def job():
        res = solve_dirichlet(spec)
        rows = [{"kind": "dirichlet-general", "n": grid.n, "eps": grid.side, "value": res.value,
                 "certified": res.certified, "gap": res.diagnostics["gap"], "seed": seed}]
        return rows, CELL_COLUMNS, {"spec": spec.to_dict(), "result": res.to_dict()}

    return job


BLOWUP_COLUMNS = ("kind", "eps", "n", "value", "ratio", "seed")


def _cmd_blowup(cfg, seed):
    N, d = _dims(cfg)
    W, psi = _densities(cfg, N, d)
    target = cfg.get("target", "bulk")
    eps = _require(cfg, "eps")
    n = int(cfg.get("n", 8))
    x0 = cfg.get("x0", [0.0] * N)
    domain = cfg.get("domain")
    domain = None if domain is None else (domain["center"], float(domain["side"]))
    budget = _budget(cfg)
    if target == "bulk":
        args = (x0, cfg.get("a", [0.0] * d), _require(cfg, "xi"), _require(cfg, "B"))

        def run():
            return blowup_bulk(W, psi, *args, eps, n=n, domain=domain, budget=budget, seed=seed)
    elif target == "surface":
        args = (x0, _require(cfg, "lambda"), cfg.get("theta", [0.0] * d),
                cfg.get("nu", np.eye(N)[0].tolist()))

        def run():
            return blowup_surface(W, psi, *args, eps, n=n, domain=domain, budget=budget, seed=seed)
    else:
        raise ConfigError(f"config.target must be 'bulk' or 'surface', got {target!r}")

    def job():
        res = run()
        payload = {"eps": res.eps, "values": res.values, "ratios": res.ratios,
                   "estimate": res.estimate, "spread": res.spread}
        return res.rows(target, seed, n), BLOWUP_COLUMNS, payload

    return job


APPROX_COLUMNS = ("quantity", "n", "value", "verdict", "seed")


def _cmd_approx(cfg, seed):
    N, d = _dims(cfg)
    grid = _grid(cfg, N, d)
    g = _field(_require(cfg, "g"), grid, "config.g")
    ladder = [int(n) for n in cfg.get("ladder", [2, 4, 8, 16])]
    p = float(cfg.get("p", 1.0))
    try:
        if "G" in cfg:
            sd = StructuredDeformation(g, cfg["G"], p)
            ml = None
        else:
            ml = MultiLevelDeformation(g, _require(cfg, "G1"), _require(cfg, "G2"), p,
                                       cfg.get("mode", "HSD"))
    except ValueError as exc:
        raise ConfigError(f"config: {exc}") from exc

    def job():
        rows = []
        payload = {}
        if ml is None:
            for n in ladder:
                u = build_determining_sequence(sd, n)
                gg = prolong(g, u.grid.n // g.grid.n)
                rows.append({"quantity": "l1", "n": n, "value": l1_distance(u, gg), "seed": seed})
            payload["l1"] = [r["value"] for r in rows]
        else:
            fam = multilevel_family(ml)
            report = verify_hsd_convergence(fam, ml, ladder)
            swapped = verify_hsd_convergence(fam.swapped(), ml, ladder)
            for name, rep in (("clause", report), ("swapped clause", swapped)):
                for clause, verdict in rep.verdicts.items():
                    rows.append({"quantity": f"{name} {clause}", "verdict": verdict, "seed": seed})
            for i, n in enumerate(ladder):
                rows.append({"quantity": "l1 (i)", "n": n, "value": report.l1["(i)"][i], "seed": seed})
            payload = {"report": report.to_dict(), "swapped": swapped.to_dict()}
        return rows, APPROX_COLUMNS, payload

    return job


ML_COLUMNS = ("case", "method", "lower", "value", "upper", "passed", "gap", "seed")


def _cmd_multilevel(cfg, seed):
    N, d = _dims(cfg)
    W, psi = _densities(cfg, N, d)
    grid = _grid(cfg, N, d)
    tol = float(cfg.get("tol", 5e-2))
    spacing = float(cfg.get("spacing", 0.25))
    cases = []
    for i, case in enumerate(_require(cfg, "cases")):
        where = f"config.cases[{i}]"
        g = _field(_require(case, "g", where), grid, f"{where}.g")
        try:
            ml = MultiLevelDeformation(g, _require(case, "G1", where), _require(case, "G2", where),
                                       float(cfg.get("p", W.p)))
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
        cases.append((case.get("name", f"case{i}"), ml))

    def one(item):
        name, ml = item
        e1 = relax_direct(ml, W, psi, seed=seed)
        e2 = relax_iterated(ml, W, psi, spacing=spacing, seed=seed)
        return name, e1, e2, compare(e1, e2, tol)

    def job():
        rows, payload = [], {}
        for name, e1, e2, cmp in _map(one, cases):
            for e in (e1, e2):
                rows.append({"case": name, "method": e.method, "lower": e.lower, "value": e.value,
                             "upper": e.upper, "passed": cmp.passed, "gap": cmp.gap, "seed": seed})
            payload[name] = {"direct": e1.to_dict(), "iterated": e2.to_dict(),
                             "comparison": cmp.to_dict()}
        return rows, ML_COLUMNS, payload

    return job


VALIDATE_COLUMNS = ("density", "kind", "hypothesis", "verdict", "worst_ratio", "n_samples", "seed")


def _cmd_validate(cfg, seed):
    N, d = _dims(cfg)
    kind = cfg.get("kind", "bulk")
    if kind not in ("bulk", "surface"):
        raise ConfigError(f"config.kind must be 'bulk' or 'surface', got {kind!r}")
    try:
        dens = resolve_density(_require(cfg, "density"), kind, N, d)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"config: bad density specification: {exc}") from exc
    n_samples = int(cfg.get("n_samples", 10_000))
    tol = float(cfg.get("tol", 1e-9))
    label = cfg["density"] if isinstance(cfg["density"], str) else json.dumps(cfg["density"], sort_keys=True)

    def job():
        fn = validate_bulk if kind == "bulk" else validate_surface
        rep = fn(dens, seed, n_samples, tol)
        rows = [{"density": label, "kind": kind, "hypothesis": h, "verdict": v,
                 "worst_ratio": rep.worst_ratio[h], "n_samples": n_samples, "seed": seed}
                for h, v in rep.verdicts.items()]
        return rows, VALIDATE_COLUMNS, rep.to_dict()

    return job


COMMANDS = {
    "relax-bulk": _cmd_relax("bulk"),
    "relax-surface": _cmd_relax("surface"),
    "dirichlet": _cmd_dirichlet,
    "blowup": _cmd_blowup,
    "approx": _cmd_approx,
    "multilevel": _cmd_multilevel,
    "validate": _cmd_validate,
}


# --------------------------------------------------------------------- run

def _load(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc.strerror or exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return cfg


def run_config(command: str, path: str, seed: Optional[int] = None,
               out: Optional[str] = None, stderr=None) -> int:
    """Run one configuration; returns the exit status."""
    stderr = sys.stderr if stderr is None else stderr
    try:
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}; choose from {sorted(COMMANDS)}")
        cfg = _load(path)
        if cfg.get("command", command) != command:
            raise ConfigError(f"{path}: config is for {cfg['command']!r}, not {command!r}")
        seed = int(cfg.get("seed", 0)) if seed is None else int(seed)
        out_dir = Path(out or os.environ.get("SDRELAX_OUT") or cfg.get("out") or "sdrelax-out")
        job = COMMANDS[command](cfg, seed)
    except ConfigError as exc:
        print(f"sdrelax: config error: {exc}", file=stderr)
        return EXIT_CONFIG
    except (KeyError, TypeError, ValueError) as exc:
        print(f"sdrelax: config error: {exc}", file=stderr)
        return EXIT_CONFIG
    try:
        rows, columns, payload = job()
    except ConfigError as exc:
        print(f"sdrelax: config error: {exc}", file=stderr)
        return EXIT_CONFIG
    except Exception as exc:  # delegated numerical failure
        print(f"sdrelax: numerical failure in {command}: {type(exc).__name__}: {exc}", file=stderr)
        return EXIT_NUMERIC
    chash = config_hash(cfg, seed)
    csv_text = rows_to_csv(rows, columns, {"config_hash": chash})
    json_text = json.dumps(payload, sort_keys=True, indent=1, default=_json_default) + "\n"
    stem = command
    csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
    _atomic_write(csv_path, csv_text)
    _atomic_write(json_path, json_text)
    manifest = {
        "command": command,
        "config": os.path.abspath(path),
        "config_hash": chash,
        "seed": seed,
        "versions": {"sdrelax": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "outputs": {p.name: hashlib.sha256(t.encode()).hexdigest()
                    for p, t in ((csv_path, csv_text), (json_path, json_text))},
    }
    _atomic_write(out_dir / f"{stem}.manifest.json", json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return EXIT_OK


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sdrelax", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory (default ./sdrelax-out)")
    sub.add_parser("catalog", help="list built-in densities")
    args = parser.parse_args(argv)
    if args.command == "catalog":
        for row in list_catalog():
            print(json.dumps(row, sort_keys=True))
        return EXIT_OK
    return run_config(args.command, args.config, args.seed, args.out)


if __name__ == "__main__":
    sys.exit(main())

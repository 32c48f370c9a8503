import csv
import io
import json
from pathlib import Path

import pytest

from sdrelax.cli import config_hash, main, run_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(command, cfg, tmp_path, name="cfg.json", **kw):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    err = io.StringIO()
    out = tmp_path / "out"
    code = run_config(command, str(path), out=str(out), stderr=err, **kw)
    return code, out, err.getvalue()


def read_rows(out, command):
    with open(out / f"{command}.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def test_relax_bulk_exact_value(tmp_path):
    code, out, _ = run("relax-bulk", {"W": "quadratic", "psi": "norm-jump", "p": 2,
                                      "A": 1, "B": 0}, tmp_path)
    assert code == 0
    (row,) = read_rows(out, "relax-bulk")
    assert float(row["value"]) == pytest.approx(1.0, abs=1e-6)
    assert row["certified"] == "True"


def test_validate_squared_jump(tmp_path):
    code, out, _ = run("validate", {"kind": "surface", "density": "normsq(lambda)",
                                    "n_samples": 2000}, tmp_path)
    assert code == 0
    verdicts = {r["hypothesis"]: r["verdict"] for r in read_rows(out, "validate")}
    assert verdicts["psi3"] == "fail"


def test_missing_file(tmp_path, capsys):
    assert main(["relax-bulk", "--config", str(tmp_path / "nope.json")]) == 2
    assert "cannot read config" in capsys.readouterr().err


def test_invalid_json_reports_location(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"W": "quadratic",\n')
    err = io.StringIO()
    assert run_config("relax-bulk", str(path), stderr=err) == 2
    assert "line 2" in err.getvalue()


@pytest.mark.parametrize("cfg,needle", [
    ({"W": "no-such", "psi": "norm-jump", "A": 1, "B": 0}, "density"),
    ({"W": "quadratic", "psi": "norm-jump", "B": 0}, "'A'"),
    ({"W": "quadratic", "psi": "norm-jump", "A": [[1, 2]], "B": 0}, "shape"),
    ({"W": "quadratic", "psi": "norm-jump", "A": 1, "B": 0, "ladder": [2, 3]}, "nested"),
    ({"command": "validate", "W": "quadratic", "psi": "norm-jump", "A": 1, "B": 0}, "not"),
])
def test_config_errors(tmp_path, cfg, needle):
    code, out, err = run("relax-bulk", cfg, tmp_path)
    assert code == 2
    assert needle in err
    assert not out.exists()


def test_numerical_failure_exit_code(tmp_path):
    cfg = {"W": "quadratic", "psi": "norm-jump", "target": "bulk", "xi": 1, "B": 1,
           "x0": [0.9], "eps": [1, 0.5, 0.25], "domain": {"center": [0.5], "side": 1.0}}
    code, _, err = run("blowup", cfg, tmp_path)
    assert code == 3
    assert "exits" in err


@pytest.mark.parametrize("command,config", [
    ("relax-bulk", "relax_bulk_H10.json"),
    ("relax-surface", "relax_surface_p1.json"),
    ("dirichlet", "dirichlet_affine.json"),
    ("blowup", "blowup_surface.json"),
    ("approx", "approx_x02.json"),
    ("approx", "approx_x0.json"),
    ("multilevel", "multilevel_desk.json"),
    ("validate", "validate_normsq_lambda.json"),
])
def test_shipped_configs_reproducible(tmp_path, command, config):
    path = str(CONFIGS / config)
    assert run_config(command, path, out=str(tmp_path / "a")) == 0
    assert run_config(command, path, out=str(tmp_path / "b")) == 0
    a = (tmp_path / "a" / f"{command}.csv").read_bytes()
    assert a == (tmp_path / "b" / f"{command}.csv").read_bytes()
    cfg = json.loads(Path(path).read_text())
    chash = config_hash(cfg, int(cfg.get("seed", 0)))
    rows = read_rows(tmp_path / "a", command)
    assert rows and all(r["config_hash"] == chash for r in rows)
    manifest = json.loads((tmp_path / "a" / f"{command}.manifest.json").read_text())
    assert manifest["config_hash"] == chash
    assert set(manifest["outputs"]) == {f"{command}.csv", f"{command}.json"}


def test_seed_override_changes_hash(tmp_path):
    path = str(CONFIGS / "relax_bulk_H10.json")
    run_config("relax-bulk", path, seed=1, out=str(tmp_path / "a"))
    run_config("relax-bulk", path, seed=2, out=str(tmp_path / "b"))
    ra, rb = read_rows(tmp_path / "a", "relax-bulk"), read_rows(tmp_path / "b", "relax-bulk")
    assert ra[0]["seed"] == "1" and rb[0]["seed"] == "2"
    assert ra[0]["config_hash"] != rb[0]["config_hash"]


def test_workers_do_not_change_output(tmp_path, monkeypatch):
    path = str(CONFIGS / "multilevel_desk.json")
    run_config("multilevel", path, out=str(tmp_path / "serial"))
    monkeypatch.setenv("SDRELAX_WORKERS", "3")
    run_config("multilevel", path, out=str(tmp_path / "threads"))
    assert ((tmp_path / "serial" / "multilevel.csv").read_bytes()
            == (tmp_path / "threads" / "multilevel.csv").read_bytes())


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SDRELAX_OUT", str(tmp_path / "env"))
    assert run_config("relax-bulk", str(CONFIGS / "relax_bulk_H10.json")) == 0
    assert (tmp_path / "env" / "relax-bulk.csv").exists()


def test_multilevel_rows(tmp_path):
    assert run_config("multilevel", str(CONFIGS / "multilevel_desk.json"), out=str(tmp_path)) == 0
    rows = read_rows(tmp_path, "multilevel")
    assert {r["case"] for r in rows} == {"affine", "x00", "jump"}
    assert all(r["passed"] == "True" for r in rows)


def test_catalog_command(capsys):
    assert main(["catalog"]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    names = {r["name"]: r for r in rows}
    assert len(rows) >= 6
    assert names["quadratic"]["p"] == 2


def test_console_script_help(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    assert "relax-bulk" in capsys.readouterr().out

import json
import subprocess
import sys
from pathlib import Path

import pytest

from malliavin_smp.cli import DEFAULTS, ConfigError, apply_override, main, resolve, validate

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def small_chaos():
    return {"schema_version": 1, "kind": "chaos_suite", "seed": 5, "n_paths": 400, "grid": {"T": 1.0, "N": 4}}


def test_shipped_configs_validate():
    names = sorted(p.stem for p in CONFIGS.glob("*.json"))
    assert names == sorted(DEFAULTS)
    for p in CONFIGS.glob("*.json"):
        params = resolve(json.loads(p.read_text()))
        assert params["kind"] == p.stem and "threads" not in params


def test_missing_seed_is_a_field_error(tmp_path, capsys):
    cfg = small_chaos()
    del cfg["seed"]
    assert main(["run", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "'seed' is a required property" in err
    assert not (tmp_path / "o" / "summary.json").exists()


def test_schema_rejects_unknown_and_bad_fields():
    for bad in ({"grid": {"T": -1.0}}, {"extra": 1}, {"schema_version": 2}, {"seed": -3}, {"kind": "nope"}):
        cfg = small_chaos() | bad
        with pytest.raises(ConfigError) as exc:
            validate(cfg)
        assert "schema violation" in str(exc.value)
    with pytest.raises(ConfigError, match="grid.T"):
        validate(small_chaos() | {"grid": {"T": 0}})


def test_override_parses_json_and_nests():
    cfg = apply_override(small_chaos(), "grid.N=7")
    apply_override(cfg, "model.sizes=[1.0, 2.0]")
    apply_override(cfg, "filtration.features=B")
    assert cfg["grid"] == {"T": 1.0, "N": 7} and cfg["model"]["sizes"] == [1.0, 2.0]
    assert cfg["filtration"]["features"] == "B"
    with pytest.raises(ConfigError):
        apply_override(cfg, "grid.N")
    with pytest.raises(ConfigError):
        apply_override(cfg, "seed.x=1")


def test_run_outputs_and_determinism(tmp_path, capsys):
    cfg = write(tmp_path, small_chaos())
    codes = [main(["run", cfg, "--out", str(tmp_path / d), "--threads", t, "--override", "n_paths=300"])
             for d, t in (("a", "1"), ("b", "1"), ("c", "3"))]
    assert codes[0] in (0, 1) and len(set(codes)) == 1
    out = capsys.readouterr().out
    assert out.count("PASS") + out.count("FAIL") == 3 * len(json.loads((tmp_path / "a" / "summary.json").read_text())["checks"])
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "summary.json" in files and any(f.endswith(".csv") for f in files)
    for f in files:
        a = (tmp_path / "a" / f).read_bytes()
        assert a == (tmp_path / "b" / f).read_bytes() == (tmp_path / "c" / f).read_bytes()
        assert b"\r\n" not in a
    s = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert s["config"] == json.loads(Path(cfg).read_text()) | {"n_paths": 300}
    assert s["resolved"]["n_paths"] == 300 and s["resolved"]["grid"]["N"] == 4
    assert s["passed"] == (codes[0] == 0) and s["seed"] == 5


def test_numerical_error_exits_2(tmp_path, capsys):
    cfg = {"schema_version": 1, "kind": "adjoint_suite", "seed": 1, "n_paths": 20, "grid": {"T": 1.0, "N": 20},
           "check_N": 5, "linear": {"b": [0.1, 0.2, 1.0], "sigma": [0.2, 0.3, 0.0], "theta": [0.0, -5.0, 0.0]}}
    assert main(["run", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2
    assert "numerical error" in capsys.readouterr().err


def test_bad_json_and_threads(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert main(["run", str(p)]) == 2
    assert main(["run", write(tmp_path, small_chaos()), "--threads", "0"]) == 2


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path, small_chaos())
    r = subprocess.run([sys.executable, "-m", "malliavin_smp", "run", cfg, "--out", str(tmp_path / "o"),
                        "--override", "n_paths=200"], capture_output=True, text=True, timeout=300)
    assert r.returncode in (0, 1), r.stderr
    assert (tmp_path / "o" / "summary.json").exists()

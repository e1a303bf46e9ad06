"""Command line driver: ``run <config.json> [--out DIR] [--threads N] [--override key=value]``.

Exit status 0 when every check passes, 1 when some check fails, 2 on a config
or numerical error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

import jsonschema

from .experiments import SUITES
from .linear import DomainError
from .sde import AdmissibilityError, SimulationError

SCHEMA_VERSION = 1

_LINEAR = {
    "type": "object",
    "properties": {
        "b": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "sigma": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "theta": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "running": {"type": "string"},
        "terminal": {"type": "string"},
    },
    "additionalProperties": False,
}
_GRID = {
    "type": "object",
    "properties": {"T": {"type": "number", "exclusiveMinimum": 0}, "N": {"type": "integer", "minimum": 1}},
    "additionalProperties": False,
}
_ATOMS = {"type": "array", "items": {"type": "number"}}
_SEARCH = {
    "type": "object",
    "properties": {"start": {"type": "number"}, "stop": {"type": "number"},
                   "step": {"type": "number", "exclusiveMinimum": 0}, "tolerance": {"type": "number", "minimum": 0}},
    "required": ["start", "stop", "step"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "kind", "seed"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "kind": {"enum": sorted(SUITES)},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**63 - 1},
        "n_paths": {"type": "integer", "minimum": 2},
        "grid": _GRID,
        "fine_N": {"type": "integer", "minimum": 1},
        "check_N": {"type": "integer", "minimum": 1},
        "model": {
            "type": "object",
            "properties": {
                "atom_size": {"type": "number"}, "intensity": {"type": "number", "exclusiveMinimum": 0},
                "sizes": _ATOMS, "intensities": _ATOMS,
                "b0": {"type": "number"}, "b1": {"type": "number"}, "s0": {"type": "number"},
                "s1": {"type": "number"}, "h0": {"type": "number"}, "h1": {"type": "number"},
                "xi": {"type": "number", "exclusiveMinimum": 0}, "zeta": {"type": "number"},
                "utility": {"type": "object",
                            "properties": {"kind": {"enum": ["log", "power"]},
                                           "gamma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
                            "required": ["kind"], "additionalProperties": False},
                "alpha": {"type": "number"}, "beta": {"type": "number"},
                "gamma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "x0": {"type": "number", "exclusiveMinimum": 0}, "M0": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "linear": _LINEAR,
        "x0": {"type": "number"},
        "u": {"type": "number"},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "toy": {"type": "object",
                "properties": {"T": {"type": "number", "exclusiveMinimum": 0}, "N": {"type": "integer", "minimum": 1},
                               "u": {"type": "number"}, "x0": {"type": "number"}},
                "additionalProperties": False},
        "jump_model": {"type": "object",
                       "properties": {"grid": _GRID, "sizes": _ATOMS, "intensities": _ATOMS, "linear": _LINEAR,
                                      "u": {"type": "number"}, "x0": {"type": "number"}},
                       "additionalProperties": False},
        "filtration": {"type": "object",
                       "properties": {"delay": {"type": "number", "minimum": 0},
                                      "features": {"type": "array", "items": {"enum": ["B", "eta", "N", "X"]}},
                                      "degree": {"type": "integer", "minimum": 0, "maximum": 4}},
                       "additionalProperties": False},
        "grid_search": _SEARCH,
        "bump_times": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "bump_width": {"type": "number", "exclusiveMinimum": 0},
        "n_buckets": {"type": "integer", "minimum": 1},
        "block_size": {"type": "integer", "minimum": 1},
        "rel_tol": {"type": "number", "exclusiveMinimum": 0},
        "output": {"type": "object", "properties": {"dir": {"type": "string"}}, "additionalProperties": False},
    },
    "additionalProperties": False,
}

_SIMPLE_LINEAR = {"b": [0.1, 0.2, 1.0], "sigma": [0.2, 0.3, 0.0], "theta": [0.1, 0.2, 0.0],
                  "running": "-u**2/2", "terminal": "x"}

DEFAULTS = {
    "duality_suite": {"n_paths": 100_000, "grid": {"T": 1.0, "N": 50}, "fine_N": 1000,
                      "model": {"atom_size": 1.0, "intensity": 1.0}},
    "chaos_suite": {"n_paths": 20_000, "grid": {"T": 1.0, "N": 6},
                    "model": {"sizes": [1.0, -0.5], "intensities": [1.0, 2.0]}},
    "adjoint_suite": {"n_paths": 2_000, "grid": {"T": 1.0, "N": 1000},
                      "model": {"sizes": [0.5], "intensities": [1.0]}, "linear": _SIMPLE_LINEAR,
                      "x0": 1.0, "u": 0.5, "epsilon": 1e-4},
    "mp_check": {"n_paths": 100_000, "toy": {"T": 1.0, "N": 100, "u": 0.3, "x0": 0.0},
                 "jump_model": {"grid": {"T": 1.0, "N": 20}, "sizes": [0.5], "intensities": [1.0],
                                "linear": _SIMPLE_LINEAR, "u": 0.5, "x0": 1.0}},
    "dividend": {"n_paths": 20_000, "grid": {"T": 1.0, "N": 100},
                 "model": {"b0": 0.1, "b1": 0.0, "s0": 0.2, "s1": 0.0, "h0": 0.1, "h1": 0.0, "xi": 1.0, "zeta": 2.0,
                           "utility": {"kind": "log"}, "sizes": [0.5], "intensities": [1.0]},
                 "x0": 1.0, "filtration": {"delay": 0.0, "features": ["B", "eta"], "degree": 2},
                 "grid_search": {"start": 0.3, "stop": 0.7, "step": 0.01},
                 "bump_times": [0.1, 0.5, 0.8], "bump_width": 0.05},
    "portfolio": {"n_paths": 20_000, "grid": {"T": 1.0, "N": 500},
                  "model": {"alpha": 0.1, "beta": 0.2, "gamma": 0.5, "x0": 1.0, "M0": 2.0}, "n_buckets": 10},
    "merton": {"n_paths": 100_000, "grid": {"T": 1.0, "N": 1000}, "model": {"alpha": 0.1, "beta": 0.2, "gamma": 0.5},
               "x0": 1.0, "n_buckets": 20, "block_size": 4096, "rel_tol": 0.05,
               "filtration": {"delay": 0.0, "features": ["B", "X"], "degree": 2},
               "grid_search": {"start": 3.0, "stop": 7.0, "step": 0.1, "tolerance": 0.3}},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in top.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


def apply_override(config: dict, item: str) -> dict:
    """``a.b.c=value`` with ``value`` parsed as JSON when possible, else kept as a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r}: expected key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = config
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r}: {part!r} is not an object")
    node[parts[-1]] = value
    return config


def validate(config: dict) -> None:
    errors = sorted(jsonschema.Draft202012Validator(CONFIG_SCHEMA).iter_errors(config), key=lambda e: list(e.path))
    if errors:
        lines = [f"{'.'.join(str(p) for p in e.path) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("config schema violation\n  " + "\n  ".join(lines))


def resolve(config: dict) -> dict:
    """Validated config merged over the defaults of its kind."""
    validate(config)
    params = _merge(DEFAULTS[config["kind"]], config)
    params.pop("output", None)
    return params


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool,)):
        return "true" if v else "false"
    return repr(float(v))


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def run(config: dict, out_dir: str | Path | None = None, threads: int = 1) -> int:
    params = resolve(config)
    out_dir = Path(out_dir or config.get("output", {}).get("dir") or f"out/{config['kind']}")
    out_dir.mkdir(parents=True, exist_ok=True)
    outcome = SUITES[config["kind"]](dict(params, threads=threads))
    summary = {
        "schema_version": SCHEMA_VERSION,
        "kind": config["kind"],
        "seed": config["seed"],
        "config": config,
        "resolved": params,
        "passed": outcome.passed,
        "checks": [c.to_dict() for c in outcome.checks],
    }
    with open(out_dir / "summary.json", "w", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=False)
        fh.write("\n")
    for stem, (header, rows) in outcome.tables.items():
        write_csv(out_dir / f"{stem}.csv", header, rows)
    for c in outcome.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}")
    return 0 if outcome.passed else 1


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="malliavin_smp")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("config")
    r.add_argument("--out", default=None)
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args(argv)
    try:
        with open(args.config) as fh:
            config = json.load(fh)
        if not isinstance(config, dict):
            raise ConfigError("config must be a JSON object")
        for item in args.override:
            apply_override(config, item)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return run(config, args.out, args.threads)
    except (ConfigError, json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SimulationError, AdmissibilityError, DomainError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

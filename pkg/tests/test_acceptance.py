"""Acceptance criteria 1-9 at full scale, one PASS/FAIL line per criterion."""
import json
import time
from pathlib import Path

import pytest

from malliavin_smp.cli import DEFAULTS, main, resolve
from malliavin_smp.experiments import SUITES, Check

pytestmark = pytest.mark.slow

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
_CACHE = {}


def run_suite(kind):
    if kind not in _CACHE:
        params = resolve(json.loads((CONFIGS / f"{kind}.json").read_text()))
        t0 = time.perf_counter()
        out = SUITES[kind](dict(params, threads=1))
        _CACHE[kind] = (params, out, time.perf_counter() - t0)
    return _CACHE[kind]


def verdict(log, number, title, checks, elapsed, budget):
    failed = [c.name for c in checks if not c.passed]
    ok = bool(checks) and not failed and (budget is None or elapsed < budget)
    extra = f" failed: {', '.join(failed)}" if failed else ""
    limit = "" if budget is None else f" (budget {budget:.0f}s)"
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  [{len(checks)} checks, {elapsed:.1f}s{limit}]{extra}"
    print(line)
    log.append(line)
    return ok


def test_criterion_1_duality(acceptance_log):
    params, out, dt = run_suite("duality_suite")
    assert params["n_paths"] >= 100_000
    names = {c.name for c in out.checks}
    assert {"brownian_BT_u1", "brownian_BT2_uB", "brownian_const", "poisson_eta_psi_z", "poisson_const",
            "poisson_I2_psi1", "engine_BT2_uB_fine_analytic"} <= names
    assert verdict(acceptance_log, 1, "duality suite within 3 pooled stderr", out.checks, dt, 60)


def test_criterion_2_chaos_identities(acceptance_log):
    _, out, dt = run_suite("chaos_suite")
    checks = [c for c in out.checks if "chain_rule" not in c.name]
    exact = [c for c in checks if not c.name.endswith("_mc")]
    assert all(c.tolerance == 1e-12 for c in exact) and len(exact) == 8
    assert verdict(acceptance_log, 2, "chaos isometries and commutation, relative 1e-12", checks, dt, 60)


def test_criterion_3_chain_rules(acceptance_log):
    _, out, dt = run_suite("chaos_suite")
    checks = [c for c in out.checks if "chain_rule" in c.name]
    assert len(checks) == 6 and all(c.tolerance == 1e-9 for c in checks)
    assert verdict(acceptance_log, 3, "chain rules, absolute 1e-9 on 1e3 paths", checks, dt, 60)


def test_criterion_4_adjoint(acceptance_log):
    params, out, dt = run_suite("adjoint_suite")
    assert params["grid"]["T"] / params["grid"]["N"] == pytest.approx(1e-3) and params["epsilon"] == 1e-4
    names = {c.name for c in out.checks}
    assert {"variational_vs_fd", "G_flow_property", "p_equals_zeta", "p_exponential_quadrature",
            "p_marginal_utility_rho0"} <= names
    assert verdict(acceptance_log, 4, "variational, G flow and p closed forms", out.checks, dt, 60)


def test_criterion_5_maximum_principle(acceptance_log):
    params, out, dt = run_suite("mp_check")
    assert params["n_paths"] >= 100_000
    names = {c.name for c in out.checks}
    assert {"toy_fd", "toy_variational_form", "jump_model_adjoint_identity"} <= names
    assert verdict(acceptance_log, 5, "toy dJ/dy = 0.4 and adjoint identity residual", out.checks, dt, 120)


def test_criterion_6_dividend(acceptance_log):
    params, out, dt = run_suite("dividend")
    assert params["grid_search"]["step"] == 0.01
    names = {c.name for c in out.checks}
    assert {"foc_matches_closed_form", "grid_search_argmax"} <= names
    assert verdict(acceptance_log, 6, "dividend rate 0.5 and grid-search argmax", out.checks, dt, 120)


def test_criterion_7_merton(acceptance_log):
    params, out, dt = run_suite("merton")
    assert params["n_paths"] >= 100_000 and params["grid"]["T"] / params["grid"]["N"] == pytest.approx(1e-3)
    names = {c.name for c in out.checks}
    assert {"fraction_per_bucket", "merton_critical", "zero_control_fails"} <= names
    assert verdict(acceptance_log, 7, "Merton fraction 5.0, criticality and zero-control witness",
                   out.checks, dt, 300)


def test_criterion_8_girsanov_clark_ocone(acceptance_log):
    _, out, dt = run_suite("portfolio")
    names = {c.name for c in out.checks}
    assert {"E[N_T]=1", "E_Q[Btilde_T]=0", "E_Q[Btilde_T^2]=T", "clark_ocone_replication"} <= names
    assert verdict(acceptance_log, 8, "Girsanov moments and Clark-Ocone replication", out.checks, dt, 120)


def test_criterion_9_determinism(acceptance_log, tmp_path, capsys):
    # every experiment kind, reduced in size, run twice with different thread counts
    small = {"duality_suite": ["n_paths=2000", "fine_N=100"], "chaos_suite": ["n_paths=500"],
             "adjoint_suite": ["n_paths=50", "grid.N=100", "check_N=10"], "mp_check": ["n_paths=500"],
             "dividend": ["n_paths=500"], "portfolio": ["n_paths=1000", "grid.N=100"],
             "merton": ["n_paths=1000", "grid.N=100", "block_size=300"]}
    assert set(small) == set(DEFAULTS)
    t0 = time.perf_counter()
    checks = []
    for kind, overrides in small.items():
        dirs = []
        for threads in ("1", "2"):
            d = tmp_path / f"{kind}_{threads}"
            args = ["run", str(CONFIGS / f"{kind}.json"), "--out", str(d), "--threads", threads]
            for o in overrides:
                args += ["--override", o]
            assert main(args) in (0, 1)
            dirs.append(d)
        csvs = sorted(p.name for p in dirs[0].glob("*.csv"))
        same = bool(csvs) and all((dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes() for f in csvs)
        same = same and (dirs[0] / "summary.json").read_bytes() == (dirs[1] / "summary.json").read_bytes()
        checks.append(Check(kind, same, None, None))
    capsys.readouterr()
    assert verdict(acceptance_log, 9, "byte-identical reruns across thread counts", checks,
                   time.perf_counter() - t0, None)

"""Experiment suites run by the command line driver.

Each suite takes a resolved parameter dict and returns an :class:`Outcome`: named
checks with a verdict, plus CSV tables. Everything is a deterministic function
of the parameters and the seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import sympy as sp

from . import chaos as ch
from .adjoint import compute_adjoint, p_functional
from .applications import (DividendModel, MarketModel, Utility, clark_ocone_portfolio, dividend_foc_solve,
                           dividend_grid_search, dividend_p, fraction_grid_search, girsanov_density,
                           martingale_M, merton_control, portfolio_criticality, power_utility_solution,
                           q_conditional)
from .checker import (adjoint_identity_residual, bucket_cells, conditional_hamiltonian_gradient,
                      directional_derivative, perturbation_bump)
from .malliavin import (Smooth, brownian_at, compensated_count_at, duality_residual,
                        exponential_martingale)
from .noise import LevyModel, PathSource, TimeGrid, generate_paths
from .regression import conditional_expectation
from .sde import Control, FiltrationSpec, linear_coefficients, simulate_state, stochastic_exponential_G, \
    variational_process


@dataclass
class Check:
    name: str
    passed: bool
    estimate: float
    reference: float | None = None
    stderr: float | None = None
    statistic: float | None = None      # |estimate - reference| in the unit of the band
    tolerance: float | None = None

    def to_dict(self) -> dict:
        def clean(x):
            if x is None:
                return None
            x = float(x)
            return x if math.isfinite(x) else ("inf" if x > 0 else ("-inf" if x < 0 else "nan"))

        return {"name": self.name, "passed": bool(self.passed), "estimate": clean(self.estimate),
                "reference": clean(self.reference), "stderr": clean(self.stderr),
                "statistic": clean(self.statistic), "tolerance": clean(self.tolerance)}


@dataclass
class Outcome:
    checks: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)      # file stem -> (header, rows)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, check: Check) -> Check:
        self.checks.append(check)
        return check


def _band(name, est, ref, se, band=3.0) -> Check:
    gap = abs(est - ref)
    stat = (0.0 if gap == 0.0 else math.inf) if se == 0.0 else gap / se
    return Check(name, stat < band, est, ref, se, stat, band)


def _abs(name, est, ref, tol) -> Check:
    gap = abs(est - ref)
    return Check(name, gap <= tol, est, ref, None, gap, tol)


def _grid(p) -> TimeGrid:
    return TimeGrid.uniform(float(p["grid"]["T"]), int(p["grid"]["N"]))


def _checks_table(out: Outcome, stem: str = "checks"):
    rows = [[c.name, c.estimate, c.reference, c.stderr, c.statistic, c.tolerance,
             "pass" if c.passed else "fail"] for c in out.checks]
    out.tables[stem] = (["check", "estimate", "reference", "stderr", "statistic", "tolerance", "verdict"], rows)


def _filtration(p) -> FiltrationSpec:
    f = p.get("filtration", {})
    return FiltrationSpec(float(f.get("delay", 0.0)), tuple(f.get("features", ("B", "eta", "X"))),
                          int(f.get("degree", 2)))


# --- duality ------------------------------------------------------------------------

def duality_suite(p: dict) -> Outcome:
    grid = _grid(p)
    z, lam = float(p["model"]["atom_size"]), float(p["model"]["intensity"])
    n, seed, threads = int(p["n_paths"]), int(p["seed"]), int(p.get("threads", 1))
    out = Outcome()
    N = grid.n_cells
    PB = generate_paths(LevyModel((), (), brownian=True), grid, n, seed, workers=threads)
    PJ = generate_paths(LevyModel((z,), (lam,), brownian=False), grid, n, seed + 1, workers=threads)
    T = grid.T

    BT = ch.ChaosVector.from_kernels(ch.BROWNIAN, grid, PB.model, {1: np.ones(N)})
    r = ch.duality_check_brownian(BT, np.ones((n, N)), PB)
    out.add(_band("brownian_BT_u1", r.lhs, r.rhs, r.stderr))
    out.add(_abs("brownian_BT_u1_exact_rhs", r.rhs, T, 1e-9))
    BT2 = ch.ChaosVector.from_kernels(ch.BROWNIAN, grid, PB.model, {0: T, 2: np.ones((N, N))})
    Bleft = PB.B[:, :-1]
    r = ch.duality_check_brownian(BT2, Bleft, PB)
    out.add(_band("brownian_BT2_uB", r.lhs, r.rhs, r.stderr))
    # adapted u = B(t_k) on cell k: the discrete value is T^2 - T dt
    out.add(Check("brownian_BT2_uB_analytic", *_analytic(r.lhs, T**2 - T * grid.dt[0], PB, BT2, Bleft)))
    r = ch.duality_check_brownian(ch.ChaosVector.constant(2.5, ch.BROWNIAN, grid, PB.model), np.ones((n, N)), PB)
    out.add(Check("brownian_const", r.rhs == 0.0 and abs(r.lhs - r.rhs) < 3 * r.stderr, r.lhs, r.rhs, r.stderr,
                  abs(r.lhs - r.rhs) / r.stderr, 3.0))

    S = ch.n_slots(grid, PJ.model, ch.POISSON)
    eta = ch.ChaosVector.from_kernels(ch.POISSON, grid, PJ.model, {1: np.full(S, z)})
    r = ch.duality_check_poisson(eta, np.full((n, N, 1), z), PJ)
    out.add(_band("poisson_eta_psi_z", r.lhs, r.rhs, r.stderr))
    out.add(_abs("poisson_eta_psi_z_exact_rhs", r.rhs, lam * z**2 * T, 1e-9))
    r = ch.duality_check_poisson(ch.ChaosVector.constant(-1.0, ch.POISSON, grid, PJ.model), np.ones((n, N, 1)), PJ)
    out.add(Check("poisson_const", r.rhs == 0.0 and abs(r.lhs - r.rhs) < 3 * r.stderr, r.lhs, r.rhs, r.stderr,
                  abs(r.lhs - r.rhs) / r.stderr, 3.0))
    I2 = ch.ChaosVector.from_kernels(ch.POISSON, grid, PJ.model, {2: np.ones((S, S))})
    r = ch.duality_check_poisson(I2, np.ones((n, N, 1)), PJ)
    lhs_x, rhs_x = ch.duality_exact(I2, ch.ChaosProcess.deterministic(np.ones(S), ch.POISSON, grid, PJ.model))
    out.add(_band("poisson_I2_psi1", r.lhs, r.rhs, r.stderr))
    out.add(_band("poisson_I2_psi1_vs_exact", r.lhs, rhs_x, r.stderr))

    # the same identities through the pathwise engine, plus the Girsanov density
    r = duality_residual(Smooth(sp.Symbol("x") ** 2, [brownian_at(grid, N)], (sp.Symbol("x"),)),
                         [brownian_at(grid, k) for k in range(N)], PB)
    out.add(_band("engine_BT2_uB", r.lhs, r.rhs, r.stderr))
    # continuous-time value 1.0 for F = B(1)^2, u = B, on a fine grid where the T dt bias is negligible
    fine = TimeGrid.uniform(T, int(p.get("fine_N", 1000)))
    F = Smooth(sp.Symbol("x") ** 2, [brownian_at(fine, fine.n_cells)], (sp.Symbol("x"),))
    lhs_i, rhs_i = [], []
    for blk in PathSource(LevyModel((), (), brownian=True), fine, n, seed + 2, 10_000).blocks():
        u = blk.B[:, :-1]
        lhs_i.append(F.value(blk) * np.sum(u * blk.dB, axis=1))
        rhs_i.append(np.sum(u * F.dt_all(blk) * fine.dt, axis=1))
    lhs_i, rhs_i = np.concatenate(lhs_i), np.concatenate(rhs_i)
    out.add(_band("engine_BT2_uB_fine", float(lhs_i.mean()), float(rhs_i.mean()),
                  float(np.std(lhs_i - rhs_i, ddof=1) / np.sqrt(n))))
    out.add(_band("engine_BT2_uB_fine_analytic", float(lhs_i.mean()), 1.0, float(np.std(lhs_i, ddof=1) / np.sqrt(n))))
    NT = exponential_martingale(np.full(N, 0.5), grid)
    r = duality_residual(NT, np.ones((n, N)), PB)
    out.add(_band("engine_density_u1", r.lhs, r.rhs, r.stderr))
    r = duality_residual(Smooth(sp.Symbol("x") ** 2, [compensated_count_at(grid, 1, 0, N)], (sp.Symbol("x"),)),
                         np.ones((n, N, 1)), PJ, kind="poisson")
    out.add(_band("engine_eta2_psi1", r.lhs, r.rhs, r.stderr))
    _checks_table(out, "duality")
    return out


def _analytic(lhs, ref, paths, F, u):
    """Band ``E[F delta(u)]`` against ``ref`` using the sample stderr of the left side."""
    vals = F.evaluate(paths) * np.sum(u * paths.dB, axis=1)
    se = float(np.std(vals, ddof=1) / np.sqrt(vals.size))
    stat = abs(lhs - ref) / se
    return stat < 3.0, lhs, ref, se, stat, 3.0


# --- chaos ----------------------------------------------------------------------------

def chaos_suite(p: dict) -> Outcome:
    grid = _grid(p)
    m = p["model"]
    model = LevyModel(tuple(m["sizes"]), tuple(m["intensities"]))
    rng = np.random.default_rng(int(p["seed"]))
    paths = generate_paths(model, grid, int(p["n_paths"]), int(p["seed"]))
    few = paths.subset(slice(0, min(1000, len(paths))))
    out = Outcome()
    rel = 1e-12

    def rsym(n, S):
        return ch.symmetrize(rng.normal(size=(S,) * n))

    def relcheck(name, a, b):
        err = abs(a - b) / max(abs(b), 1e-300)
        return out.add(Check(name, err <= rel, a, b, None, err, rel))

    for integ in ch.INTEGRATORS:
        S = ch.n_slots(grid, model, integ)
        F = ch.ChaosVector.from_kernels(integ, grid, model, {0: 0.4, 1: rsym(1, S), 2: rsym(2, S), 3: rsym(3, S)})
        relcheck(f"{integ}_isometry", ch.multiply(F, F).mean(), ch.chaos_norm(F))
        relcheck(f"{integ}_derivative_isometry", ch.derivative_norm(F), ch.derivative_norm_formula(F))
        u = ch.ChaosProcess(integ, grid, model, (rng.normal(size=S), ch.symmetrize(rng.normal(size=(S, S)), 1),
                                                 ch.symmetrize(rng.normal(size=(S, S, S)), 2)))
        scale = max(1.0, max(float(np.max(np.abs(k))) for k in u.kernels))
        err = ch.commutation_check(u) / scale
        out.add(Check(f"{integ}_commutation", err <= rel, err, 0.0, None, err, rel))
        lhs, rhs = ch.duality_exact(F, u)
        relcheck(f"{integ}_duality_exact", lhs, rhs)
        v = F.evaluate(paths) ** 2
        out.add(_band(f"{integ}_isometry_mc", float(v.mean()), ch.chaos_norm(F), float(v.std(ddof=1) / np.sqrt(v.size))))

    x, y = sp.symbols("x0 x1", real=True)
    S = ch.n_slots(grid, model, ch.BROWNIAN)
    f, g = rng.normal(size=S), rng.normal(size=S)
    I1 = ch.ChaosVector.from_kernels(ch.BROWNIAN, grid, model, {1: np.ones(S)})
    If = ch.ChaosVector.from_kernels(ch.BROWNIAN, grid, model, {1: f})
    Ig = ch.ChaosVector.from_kernels(ch.BROWNIAN, grid, model, {1: g})
    G2 = ch.ChaosVector.from_kernels(ch.BROWNIAN, grid, model, {1: f, 2: rsym(2, S)})
    for name, phi, Fs in (("x^2_I1", x**2, [I1]), ("xy_I1f_I1g", x * y, [If, Ig]),
                          ("cubic_mixed", x**3 - 2 * x * y + y, [G2, Ig])):
        e = ch.chain_rule_brownian(phi, Fs, few, (x, y)[:len(Fs)]).max_abs_error
        out.add(Check(f"brownian_chain_rule_{name}", e <= 1e-9, e, 0.0, None, e, 1e-9))
    Sp = ch.n_slots(grid, model, ch.POISSON)
    eta = ch.ChaosVector.from_kernels(ch.POISSON, grid, model, {1: np.tile(model.z, grid.n_cells)})
    Hp = ch.ChaosVector.from_kernels(ch.POISSON, grid, model, {1: rng.normal(size=Sp), 2: rsym(2, Sp)})
    for name, phi, Fs in (("x^2_eta", x**2, [eta]), ("x^3_eta", x**3, [eta]), ("xy_mixed", x * y + y**2, [eta, Hp])):
        e = ch.chain_rule_poisson(phi, Fs, few, (x, y)[:len(Fs)]).max_abs_error
        out.add(Check(f"poisson_chain_rule_{name}", e <= 1e-9, e, 0.0, None, e, 1e-9))
    _checks_table(out, "chaos")
    return out


# --- adjoint --------------------------------------------------------------------------

def adjoint_suite(p: dict) -> Outcome:
    grid = _grid(p)
    m = p["model"]
    model = LevyModel(tuple(m["sizes"]), tuple(m["intensities"]))
    n, seed = int(p["n_paths"]), int(p["seed"])
    paths = generate_paths(model, grid, n, seed, workers=int(p.get("threads", 1)))
    out = Outcome()
    lin = p["linear"]
    co = linear_coefficients(b=lin["b"], sigma=lin["sigma"], theta=lin["theta"],
                             running=lin.get("running", "0"), terminal=lin.get("terminal", "0"))
    x0, u0, eps = float(p["x0"]), float(p["u"]), float(p.get("epsilon", 1e-4))

    # variational process versus a common-random-number finite difference
    ctl, beta = Control.constant(u0), Control.constant(1.0)
    st = simulate_state(co, ctl, paths, x0)
    Y = variational_process(co, ctl, beta, paths, st)
    bumped = simulate_state(co, Control.constant(u0 + eps), paths, x0)
    fd = (bumped.XT - st.XT) / eps
    err = float(np.mean(np.abs(fd - Y.XT)) / np.mean(np.abs(Y.XT)))
    out.add(Check("variational_vs_fd", err < 0.01, float(np.mean(Y.XT)), float(np.mean(fd)), None, err, 0.01))

    G = stochastic_exponential_G(co, ctl, paths, st)
    N = grid.n_cells
    worst = 0.0
    for t, r, s in ((0, N // 3, N), (N // 4, N // 2, 3 * N // 4), (0, 0, N)):
        lhs, rhs = G(t, s), G(t, r) * G(r, s)
        worst = max(worst, float(np.max(np.abs(lhs - rhs) / np.abs(lhs))))
    out.add(Check("G_flow_property", worst <= 1e-10, worst, 0.0, None, worst, 1e-10))
    out.add(Check("G_identity", bool(np.all(G(5, 5) == 1.0)), 1.0, 1.0, None, 0.0, 0.0))

    sub = paths.subset(slice(0, min(n, 2000)))
    zeta, mu = 2.0, 0.3
    adj = dividend_p(DividendModel(b0=0.2, s0=0.3, h0=0.1, zeta=zeta), sub)
    e = float(np.max(np.abs(adj.p - zeta)))
    out.add(Check("p_equals_zeta", e <= 1e-12, float(adj.p.mean()), zeta, None, e, 1e-12))
    adj = dividend_p(DividendModel(b1=mu, zeta=zeta), sub)
    ref = zeta * np.exp(mu * (grid.T - grid.t))
    e = float(np.max(np.abs(adj.p - ref) / ref))
    tol = mu**3 * grid.T * float(grid.dt.max()) ** 2        # trapezoid error bound order
    out.add(Check("p_exponential_quadrature", e <= tol, float(adj.p[0, 0]), float(ref[0]), None, e, tol))
    mk = MarketModel(alpha=0.1, beta=0.2, utility=Utility.power(0.5))
    pm = sub.subset(slice(None)) if not sub.model.n_atoms else generate_paths(
        LevyModel((), (), brownian=True), grid, len(sub), seed + 7)
    cm = mk.coefficients()
    ctl_m = merton_control(mk)
    stm = simulate_state(cm, ctl_m, pm, 1.0, "exact")
    adj = compute_adjoint(cm, ctl_m, pm, stm, cells=[0, N // 2])
    e = float(np.max(np.abs(adj.p - (stm.XT ** (-0.5))[:, None])))
    out.add(Check("p_marginal_utility_rho0", e <= 1e-12, float(adj.p[0, 0]), float(stm.XT[0] ** -0.5), None, e, 1e-12))

    # q and r are the engine derivatives of the assembled p; an exact identity, so a coarse grid suffices
    cgrid = TimeGrid.uniform(grid.T, int(p.get("check_N", 50)))
    cpaths = generate_paths(model, cgrid, min(n, 2000), seed + 3)
    Nc = cgrid.n_cells
    small = cpaths.subset(slice(0, 300))
    st2 = simulate_state(co, ctl, small, x0, "exact")
    adj = compute_adjoint(co, ctl, small, st2, cells=[0, Nc // 2])
    worst = 0.0
    for k in (0, Nc // 2):
        pf = p_functional(adj.kparts, co, small, st2, k)
        worst = max(worst, float(np.max(np.abs(pf.value(small) - adj.p[:, k]))),
                    float(np.max(np.abs(pf.dt(small, k) - adj.q[:, k]))))
        for i in range(model.n_atoms):
            worst = max(worst, float(np.max(np.abs(pf.dz(small, k, i) - adj.r[:, k, i]))))
    out.add(Check("qr_are_derivatives_of_p", worst <= 1e-9, worst, 0.0, None, worst, 1e-9))
    stc = simulate_state(co, ctl, cpaths, x0, "exact")
    pf = p_functional(compute_adjoint(co, ctl, cpaths, stc, with_qr=False).kparts, co, cpaths, stc, 0)
    r = duality_residual(pf, np.ones((len(cpaths), Nc)), cpaths)
    out.add(_band("p_duality_brownian", r.lhs, r.rhs, r.stderr))
    if model.n_atoms:
        r = duality_residual(pf, np.ones((len(cpaths), Nc, model.n_atoms)), cpaths, kind="poisson")
        out.add(_band("p_duality_poisson", r.lhs, r.rhs, r.stderr))
    _checks_table(out, "adjoint")
    return out


# --- maximum principle harness ----------------------------------------------------

def mp_check(p: dict) -> Outcome:
    out = Outcome()
    toy = p["toy"]
    T, u_toy = float(toy["T"]), float(toy["u"])
    tgrid = TimeGrid.uniform(T, int(toy["N"]))
    det = generate_paths(LevyModel((), (), brownian=False), tgrid, 4, int(p["seed"]))
    co = linear_coefficients(b=(0.0, 0.0, 1.0), running="-u**2", terminal="x")
    ref = T - 2 * u_toy * T
    dd = directional_derivative(co, Control.constant(u_toy), Control.constant(1.0), det, float(toy["x0"]))
    out.add(_abs("toy_fd", dd.fd.value, ref, 1e-6))
    out.add(_abs("toy_variational_form", dd.analytic.value, ref, 1e-6))
    out.add(Check("toy_step_halving", dd.halving_consistent, dd.halving_gap, 0.0, dd.halving_stderr,
                  dd.halving_gap, None))
    ir = adjoint_identity_residual(co, Control.constant(u_toy), Control.constant(1.0), det, float(toy["x0"]))
    out.add(Check("toy_adjoint_identity", ir.residual < 3.0, ir.lhs.value, ir.fd.value, ir.stderr, ir.residual, 3.0))
    st = simulate_state(co, Control.constant(u_toy), det, float(toy["x0"]))
    adj = compute_adjoint(co, Control.constant(u_toy), det, st)
    rep = conditional_hamiltonian_gradient(adj, co, Control.constant(u_toy), FiltrationSpec(), det, st)
    e = max(abs(b.estimate - ref) for b in rep.buckets)
    out.add(Check("toy_conditional_gradient", e <= 1e-9, rep.buckets[0].estimate, ref, None, e, 1e-9))
    out.add(Check("toy_not_critical_off_optimum", not rep.critical(), rep.fraction_passing, 0.0, None, None, None))
    st5 = simulate_state(co, Control.constant(0.5), det, float(toy["x0"]))
    adj5 = compute_adjoint(co, Control.constant(0.5), det, st5)
    rep5 = conditional_hamiltonian_gradient(adj5, co, Control.constant(0.5), FiltrationSpec(), det, st5)
    out.add(Check("toy_critical_at_optimum", rep5.critical(), rep5.fraction_passing, 1.0, None, None, 0.95))

    jm = p["jump_model"]
    grid = _grid(jm)
    model = LevyModel(tuple(jm["sizes"]), tuple(jm["intensities"]))
    paths = generate_paths(model, grid, int(p["n_paths"]), int(p["seed"]) + 1, workers=int(p.get("threads", 1)))
    lin = jm["linear"]
    co = linear_coefficients(b=lin["b"], sigma=lin["sigma"], theta=lin["theta"],
                             running=lin.get("running", "0"), terminal=lin.get("terminal", "0"))
    ir = adjoint_identity_residual(co, Control.constant(float(jm["u"])), Control.constant(1.0), paths, float(jm["x0"]))
    out.add(Check("jump_model_adjoint_identity", ir.residual < 3.0, ir.lhs.value, ir.fd.value, ir.stderr,
                  ir.residual, 3.0))
    _checks_table(out, "mp_check")
    out.tables["toy_criticality"] = _criticality_rows(rep)
    return out


def _criticality_rows(rep):
    return (["t", "estimate", "stderr", "z", "verdict"],
            [[b.t, b.estimate, b.stderr, b.z, "pass" if b.passes else "fail"] for b in rep.buckets])


# --- dividend --------------------------------------------------------------------------

def dividend(p: dict) -> Outcome:
    grid = _grid(p)
    m = p["model"]
    levy = LevyModel(tuple(m.get("sizes", ())), tuple(m.get("intensities", ())))
    paths = generate_paths(levy, grid, int(p["n_paths"]), int(p["seed"]), workers=int(p.get("threads", 1)))
    dm = DividendModel(b0=m["b0"], b1=m["b1"], s0=m["s0"], s1=m["s1"], h0=m["h0"], h1=m["h1"], xi=m["xi"],
                       zeta=m["zeta"], utility=Utility.from_dict(m.get("utility", {"kind": "log"})))
    x0 = float(p["x0"])
    out = Outcome()
    sol = dividend_foc_solve(dm, _filtration(p), paths, x0)
    out.add(Check("foc_feasible", sol.feasible, float(len(sol.infeasible)), 0.0, None, None, None))
    mean_c = sol.bucket_means()
    oracle = None
    if m["b1"] == 0.0 and m["s1"] == 0.0 and m["h1"] == 0.0:
        oracle = np.asarray(dm.utility.dU_inv(m["zeta"] / np.broadcast_to(m["xi"], grid.t.shape)), dtype=float)
        e = float(np.nanmax(np.abs(sol.c - oracle)))
        out.add(Check("foc_matches_closed_form", e <= 1e-3, float(mean_c[0]), float(oracle[0]), None, e, 1e-3))
    gs = p.get("grid_search")
    if gs:
        values = np.round(np.arange(gs["start"], gs["stop"] + 0.5 * gs["step"], gs["step"]), 12)
        res = dividend_grid_search(dm, paths, values, x0)
        target = float(np.nanmean(sol.c))
        out.add(Check("grid_search_argmax", abs(res.argmax - target) <= gs["step"] + 1e-12, res.argmax, target,
                      None, abs(res.argmax - target), gs["step"]))
        out.tables["grid_search"] = (["c", "J", "stderr"], [[v, j, s] for v, j, s in zip(values, res.J, res.stderr)])
    if sol.feasible:
        co, ctl = dm.coefficients(), sol.control()
        for t0 in p.get("bump_times", []):
            dd = directional_derivative(co, ctl, perturbation_bump(float(t0), float(p["bump_width"])), paths, x0)
            out.add(Check(f"bump_{t0}_dJdy_vanishes", dd.vanishes, dd.fd.value, 0.0, dd.fd.stderr, None, 3.0))
    se = np.nanstd(sol.c, axis=0, ddof=1) / np.sqrt(len(paths))
    out.tables["dividend"] = (["t", "estimate", "stderr", "oracle", "verdict"],
                              [[t, mean_c[k], se[k], None if oracle is None else oracle[k],
                                "" if oracle is None else ("pass" if abs(mean_c[k] - oracle[k]) <= 1e-3 else "fail")]
                               for k, t in enumerate(grid.t)])
    _checks_table(out)
    return out


# --- portfolio: Girsanov and Clark-Ocone ------------------------------------------------

def portfolio(p: dict) -> Outcome:
    grid = _grid(p)
    m = p["model"]
    mk = MarketModel(alpha=m["alpha"], beta=m["beta"], utility=Utility.power(m["gamma"]))
    paths = generate_paths(LevyModel((), (), brownian=True), grid, int(p["n_paths"]), int(p["seed"]),
                           workers=int(p.get("threads", 1)))
    out = Outcome()
    dens = girsanov_density(mk, paths)
    e = dens.normalization()
    out.add(_band("E[N_T]=1", e.value, 1.0, e.stderr))
    Bt = dens.B_tilde[:, -1]
    e = dens.expect_Q(Bt)
    out.add(_band("E_Q[Btilde_T]=0", e.value, 0.0, e.stderr))
    e = dens.expect_Q(Bt**2)
    out.add(_band("E_Q[Btilde_T^2]=T", e.value, grid.T, e.stderr))

    M0 = float(m.get("M0", 1.0))
    M = martingale_M(mk, M0, paths)
    e_mt = M[:, -1]
    out.add(_band("E[M_T]=M0", float(e_mt.mean()), M0, float(e_mt.std(ddof=1) / np.sqrt(e_mt.size))))
    rows = []
    fails = 0
    cells = bucket_cells(grid, int(p.get("n_buckets", 10)))
    for k in cells:
        fitted = conditional_expectation(M[:, -1], [paths.B[:, k], dens.N[:, k]], 2)
        d = fitted - M[:, k]
        se = float(np.std(M[:, -1] - M[:, k], ddof=1) / np.sqrt(d.size))
        z = abs(float(d.mean())) / se
        fails += z >= 3.0
        rows.append([grid.t[k], float(fitted.mean()), se, float(M[:, k].mean()), "pass" if z < 3 else "fail"])
    out.add(Check("M_t_equals_conditional_K", fails == 0, float(fails), 0.0, None, None, None))
    out.tables["martingale_M"] = (["t", "estimate", "stderr", "oracle", "verdict"], rows)

    # Bayes rule versus a directly Q-weighted regression
    rows, fails = [], 0
    for k in cells:
        a = q_conditional(Bt, dens, paths, int(k), method="bayes")
        b = q_conditional(Bt, dens, paths, int(k), method="weighted")
        d = dens.NT * (a - b)
        se = float(np.std(dens.NT * (Bt - dens.B_tilde[:, k]), ddof=1) / np.sqrt(d.size))
        z = abs(float(d.mean())) / se
        fails += z >= 3.0
        rows.append([grid.t[k], float(np.mean(dens.NT * a)), se, float(np.mean(dens.NT * b)),
                     "pass" if z < 3 else "fail"])
    out.add(Check("bayes_rule_consistency", fails == 0, float(fails), 0.0, None, None, None))
    out.tables["bayes"] = (["t", "estimate", "stderr", "oracle", "verdict"], rows)

    # replicate the optimal terminal wealth along dBtilde
    gamma = float(m["gamma"])
    x = sp.Symbol("x", positive=True)
    NT = exponential_martingale(mk.market_price_of_risk(grid), grid)
    XT = Smooth(float(m.get("x0", 1.0)) * x ** (1 / (gamma - 1)) / sp.Float(_ey(dens, gamma)), [NT], (x,))
    rep = clark_ocone_portfolio(mk, XT, paths)
    out.add(Check("clark_ocone_replication", rep.relative_error < 1e-2, rep.relative_error, 0.0, None,
                  rep.relative_error, 1e-2))
    out.add(_band("replication_initial_value", rep.initial, float(m.get("x0", 1.0)),
                  float(np.std(dens.NT * rep.target, ddof=1) / np.sqrt(len(paths)))))
    _checks_table(out)
    return out


def _ey(dens, gamma):
    return float(np.mean(dens.NT * dens.NT ** (1.0 / (gamma - 1.0))))


# --- Merton ---------------------------------------------------------------------------

def merton(p: dict) -> Outcome:
    grid = _grid(p)
    m = p["model"]
    mk = MarketModel(alpha=m["alpha"], beta=m["beta"], utility=Utility.power(m["gamma"]))
    x0 = float(p.get("x0", 1.0))
    src = PathSource(LevyModel((), (), brownian=True), grid, int(p["n_paths"]), int(p["seed"]),
                     int(p.get("block_size", 4096)))
    out = Outcome()
    cells = bucket_cells(grid, int(p.get("n_buckets", 20)))
    sol = power_utility_solution(mk, src, x0, cells=cells)
    rel = float(p.get("rel_tol", 0.05))
    err = sol.relative_errors()
    out.add(Check("fraction_per_bucket", bool(np.all(err < rel)), float(np.mean(sol.fraction_mean)),
                  sol.oracle, float(np.max(sol.fraction_stderr)), float(np.max(err)), rel))
    out.add(_abs("M0_root_vs_closed_form", sol.M0, sol.M0_closed_form, 1e-10 * abs(sol.M0_closed_form)))
    out.tables["fraction"] = (["t", "estimate", "stderr", "oracle", "verdict"],
                              [[t, sol.fraction_mean[j], sol.fraction_stderr[j], sol.oracle,
                                "pass" if err[j] < rel else "fail"] for j, t in enumerate(sol.t)])
    filt = _filtration(p) if "filtration" in p else FiltrationSpec(features=("B", "X"))
    rep = portfolio_criticality(mk, merton_control(mk), filt, src, x0, cells=cells)
    out.add(Check("merton_critical", rep.critical(0.95), rep.fraction_passing, 0.95, None, None, 0.95))
    out.tables["criticality"] = _criticality_rows(rep)
    witness = portfolio_criticality(mk, Control.constant(0.0), filt, src, x0, cells=cells)
    zmin = min(b.z for b in witness.buckets)
    out.add(Check("zero_control_fails", zmin > 5.0, witness.fraction_passing, 0.0, None, zmin, 5.0))
    out.tables["criticality_zero_control"] = _criticality_rows(witness)
    gs = p.get("grid_search")
    if gs:
        # constant-fraction policies are exact on one cell, so a coarse grid suffices here
        one = generate_paths(LevyModel((), (), brownian=True), TimeGrid.uniform(grid.T, 1), int(p["n_paths"]),
                             int(p["seed"]) + 1)
        fr = np.round(np.arange(gs["start"], gs["stop"] + 0.5 * gs["step"], gs["step"]), 12)
        res = fraction_grid_search(mk, one, fr, x0)
        tol = float(gs.get("tolerance", 2 * gs["step"]))
        out.add(Check("grid_search_argmax", abs(res.argmax - mk.merton_fraction()) <= tol, res.argmax,
                      mk.merton_fraction(), None, abs(res.argmax - mk.merton_fraction()), tol))
        out.tables["grid_search"] = (["fraction", "J", "stderr"], [[a, b, c] for a, b, c in zip(fr, res.J, res.stderr)])
    _checks_table(out)
    return out


SUITES = {"duality_suite": duality_suite, "chaos_suite": chaos_suite, "adjoint_suite": adjoint_suite,
          "mp_check": mp_check, "dividend": dividend, "portfolio": portfolio, "merton": merton}

"""Optimal portfolio with a risky asset, Girsanov reweighting and Clark-Ocone hedges.

Wealth ``dX = (rho X + (alpha - rho) u) dt + beta u dB + sum_z zeta_jump u dÑ_z`` and
reward ``E[U(X(T)) F]``. Market coefficients are deterministic functions of time,
so ``D_t(alpha / beta) = 0`` and the Girsanov correction in the Clark-Ocone
integrand vanishes.
"""
from __future__ import annotations

import csv
import dataclasses
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import sympy as sp
from scipy import optimize

from ..adjoint import compute_adjoint
from ..checker import CriticalityReport, BucketStat, bucket_cells, hamiltonian_gradient_paths
from ..malliavin import Functional, Smooth, exponential_martingale, lift
from ..noise import Paths, PathSource
from ..regression import RankWarning, fit, polynomial_features, zero_test
from ..sde import (CoefficientSet, Control, Estimate, FiltrationSpec, X_SYM, _as_t_fn, _as_tz_fn, estimate,
                   linear_coefficients, pathwise_performance, simulate_state)
from .utility import Utility

F_SYM = sp.Symbol("F", real=True)


def _blocks(source) -> Iterable[Paths]:
    return source.blocks() if isinstance(source, PathSource) else [source]


@dataclass(frozen=True)
class MarketModel:
    """Deterministic market coefficients (constants or functions of ``t``).

    ``zeta_jump`` is a constant or a function of ``(t, z)`` with values ``>= -1``.
    ``F`` is a positive constant or engine functional multiplying the utility.
    """

    alpha: float | Callable = 0.1
    beta: float | Callable = 0.2
    rho: float | Callable = 0.0
    zeta_jump: float | Callable = 0.0
    utility: Utility = field(default_factory=lambda: Utility.power(0.5))
    F: float | Functional = 1.0
    delta_beta: float = 1e-6

    def merton_fraction(self) -> float:
        """``alpha / ((1 - gamma) beta^2)`` for constant coefficients and power utility."""
        if self.utility.kind != "power":
            raise ValueError("the Merton fraction needs power utility")
        return float(self.alpha) / ((1.0 - self.utility.gamma) * float(self.beta) ** 2)

    def coefficients(self) -> CoefficientSet:
        a, r = _as_t_fn(self.alpha), _as_t_fn(self.rho)
        base = linear_coefficients(b=(0.0, self.rho, lambda t: a(t) - r(t)), sigma=(0.0, 0.0, self.beta),
                                   theta=(0.0, 0.0, self.zeta_jump))
        U, F = self.utility, lift(self.F)
        dU = sp.diff(U.expr(X_SYM), X_SYM)

        def g(x, ctx):
            return U.U(x) * F.value(ctx.paths)

        def g_x(x, ctx):
            return U.dU(x) * F.value(ctx.paths)

        return dataclasses.replace(base, g=g, g_x=g_x,
                                   terminal_gradient=lambda XT: Smooth(F_SYM * dU, [XT, F], (X_SYM, F_SYM)))

    def market_price_of_risk(self, grid) -> np.ndarray:
        """``alpha / beta`` on cells; rejects ``|beta| < delta_beta``."""
        t = grid.t[:-1]
        beta = np.broadcast_to(np.asarray(_as_t_fn(self.beta)(t), dtype=float), t.shape)
        if np.any(np.abs(beta) < self.delta_beta):
            k = int(np.argmax(np.abs(beta) < self.delta_beta))
            raise ValueError(f"|beta| below {self.delta_beta} at t={t[k]!r}")
        alpha = np.broadcast_to(np.asarray(_as_t_fn(self.alpha)(t), dtype=float), t.shape)
        return alpha / beta

    def beta_cells(self, grid) -> np.ndarray:
        t = grid.t[:-1]
        return np.broadcast_to(np.asarray(_as_t_fn(self.beta)(t), dtype=float), t.shape).copy()

    def check_jumps(self, paths: Paths):
        fn = _as_tz_fn(self.zeta_jump)
        for z in paths.model.sizes:
            if np.any(np.asarray(fn(paths.grid.t, z)) < -1.0):
                raise ValueError(f"zeta_jump < -1 at atom {z}")


# --- Girsanov -----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GirsanovDensity:
    """``N_t = exp(-int lambda dB - 1/2 int lambda^2 dt)`` and ``dB~ = lambda dt + dB``."""

    N: np.ndarray             # (n, N+1)
    dB_tilde: np.ndarray      # (n, N)
    lam: np.ndarray           # (N,)

    @property
    def NT(self) -> np.ndarray:
        return self.N[:, -1]

    @property
    def B_tilde(self) -> np.ndarray:
        out = np.zeros(self.N.shape)
        np.cumsum(self.dB_tilde, axis=1, out=out[:, 1:])
        return out

    def normalization(self) -> Estimate:
        """``E[N_T]``; should be 1 within Monte Carlo error."""
        return estimate(self.NT)

    def expect_Q(self, Z) -> Estimate:
        """``E_Q[Z] = E[N_T Z]``."""
        return estimate(self.NT * np.asarray(Z, dtype=float))


def girsanov_density(market: MarketModel, paths: Paths) -> GirsanovDensity:
    grid = paths.grid
    lam = market.market_price_of_risk(grid)
    expo = np.zeros((len(paths), grid.n_cells + 1))
    np.cumsum(-lam * paths.dB - 0.5 * lam**2 * grid.dt, axis=1, out=expo[:, 1:])
    return GirsanovDensity(np.exp(expo), lam * grid.dt + paths.dB, lam)


def _require_no_jumps_no_rate(market: MarketModel, paths: Paths):
    rho = np.asarray(_as_t_fn(market.rho)(paths.grid.t), dtype=float)
    if paths.model.n_atoms or np.any(rho != 0.0):
        raise ValueError("this construction needs a market without jumps and with rho = 0")


def martingale_M(market: MarketModel, M0: float, paths: Paths) -> np.ndarray:
    """``M_t = M0 exp(-int_0^t lambda dB - 1/2 int_0^t lambda^2 ds)``; ``K = M_T``."""
    _require_no_jumps_no_rate(market, paths)
    return M0 * girsanov_density(market, paths).N


def girsanov_features(paths: Paths, dens: GirsanovDensity, k: int, names=("B", "N", "Ninv"),
                      X: np.ndarray | None = None) -> list[np.ndarray]:
    """Regression observables at grid index ``k``: ``B``, ``N_t``, ``1 / N_t`` and optionally ``X``."""
    cols = []
    for name in names:
        if name == "B":
            cols.append(paths.B[:, k])
        elif name == "N":
            cols.append(dens.N[:, k])
        elif name == "Ninv":
            cols.append(1.0 / dens.N[:, k])
        elif name == "X":
            if X is not None:
                cols.append(X[:, k])
        else:
            raise ValueError(f"unknown feature {name!r}")
    return cols


def _regress(y: np.ndarray, cols: list[np.ndarray], degree: int, weights: np.ndarray | None = None) -> np.ndarray:
    X = polynomial_features(cols, degree, n=y.size)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankWarning)
        if weights is None:
            return fit(y, X).fitted
        sw = np.sqrt(weights)
        f = fit(y * sw, X * sw[:, None])
        return f.predict(X)


def q_conditional(Z: np.ndarray, dens: GirsanovDensity, paths: Paths, k: int, names=("B", "N", "Ninv"),
                  degree: int = 2, method: str = "bayes") -> np.ndarray:
    """``E_Q[Z | F_t]`` either by Bayes ``E[N_T Z | F_t] / N_t`` or by ``N_T``-weighted least squares."""
    cols = girsanov_features(paths, dens, k, names)
    if method == "bayes":
        return _regress(dens.NT * Z, cols, degree) / dens.N[:, k]
    if method == "weighted":
        return _regress(Z, cols, degree, weights=dens.NT)
    raise ValueError(f"unknown method {method!r}")


# --- Clark-Ocone hedge -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Replication:
    u: np.ndarray             # (n, N) amount in the risky asset on each cell
    initial: float            # E_Q[X(T)]
    replicated: np.ndarray    # (n,)
    target: np.ndarray        # (n,)
    relative_error: float     # E_Q[(X(T) - replicated)^2] / E_Q[X(T)^2]


def clark_ocone_portfolio(market: MarketModel, XT: Functional, paths: Paths, names=("B", "N", "Ninv"),
                          degree: int = 2) -> Replication:
    """``u(t) = E[N_T D_t X(T) | F_t] / (beta_t N_t)``, then replicate ``X(T)`` along ``dB~``."""
    _require_no_jumps_no_rate(market, paths)
    dens = girsanov_density(market, paths)
    beta = market.beta_cells(paths.grid)
    target = XT.value(paths)
    D = XT.dt_all(paths)
    n, N = D.shape
    u = np.empty((n, N))
    for k in range(N):
        cond = _regress(dens.NT * D[:, k], girsanov_features(paths, dens, k, names), degree)
        u[:, k] = cond / (beta[k] * dens.N[:, k])
    initial = float(np.mean(dens.NT * target))
    replicated = initial + np.sum(beta * u * dens.dB_tilde, axis=1)
    err = float(np.mean(dens.NT * (target - replicated) ** 2) / np.mean(dens.NT * target**2))
    return Replication(u, initial, replicated, target, err)


# --- power utility ---------------------------------------------------------------

def solve_M0(inverse_marginal: Callable[[np.ndarray], np.ndarray], NT: np.ndarray, x0: float) -> float:
    """Root of ``E[N_T (U')^{-1}(M0 N_T)] = x0`` in ``M0`` (budget constraint under Q)."""
    def gap(logm):
        return float(np.mean(NT * inverse_marginal(np.exp(logm) * NT))) - x0

    lo, hi = -1.0, 1.0
    for _ in range(200):
        if gap(lo) * gap(hi) < 0:
            break
        lo, hi = lo * 2, hi * 2
    else:
        raise ValueError("could not bracket the budget equation")
    return float(np.exp(optimize.brentq(gap, lo, hi, xtol=1e-14, rtol=1e-14)))


@dataclass(frozen=True, eq=False)
class PowerUtilitySolution:
    t: np.ndarray                 # bucket times
    cells: np.ndarray
    fraction: np.ndarray          # (n, buckets) u / X per path
    fraction_mean: np.ndarray
    fraction_stderr: np.ndarray
    oracle: float | None
    M0: float
    M0_closed_form: float
    XT: np.ndarray                # terminal wealth samples
    Xt: np.ndarray                # (n, buckets) wealth E_Q[X(T) | F_t]

    def relative_errors(self) -> np.ndarray:
        if self.oracle is None:
            raise ValueError("no closed-form oracle for this model")
        return np.abs(self.fraction_mean - self.oracle) / abs(self.oracle)

    def passes(self, rel: float = 0.05) -> bool:
        return bool(np.all(self.relative_errors() < rel))

    def to_csv(self, path: str | Path, rel: float = 0.05) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "estimate", "stderr", "oracle", "verdict"])
            for j, t in enumerate(self.t):
                o = "" if self.oracle is None else repr(self.oracle)
                v = "" if self.oracle is None else (
                    "pass" if abs(self.fraction_mean[j] - self.oracle) < rel * abs(self.oracle) else "fail")
                w.writerow([repr(float(t)), repr(float(self.fraction_mean[j])),
                            repr(float(self.fraction_stderr[j])), o, v])


def _constant_market(market: MarketModel) -> bool:
    return not any(callable(v) for v in (market.alpha, market.beta, market.rho))


def power_utility_solution(market: MarketModel, source, x0: float = 1.0, gamma: float | None = None,
                           F: float | Functional | None = None, cells=None, n_buckets: int = 20,
                           names=("B", "N", "Ninv"), degree: int = 2) -> PowerUtilitySolution:
    """Optimal fraction ``u / X = (1/beta) E[N_T D_t Y | F_t] / E[N_T Y | F_t]`` with
    ``Y = (N_T / F)^{1/(gamma-1)}`` and terminal wealth ``X(T) = M0^{1/(gamma-1)} Y``.

    ``source`` is a :class:`Paths` or a :class:`PathSource`; only bucket slices are
    kept in memory.
    """
    gamma = market.utility.gamma if gamma is None else float(gamma)
    if gamma is None or not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    F = market.F if F is None else F
    Ff = lift(F)
    e = 1.0 / (gamma - 1.0)
    n_sym = sp.Symbol("n", real=True)
    parts = {"NT": [], "Y": [], "DY": [], "Nt": [], "cols": []}
    grid = None
    for blk in _blocks(source):
        _require_no_jumps_no_rate(market, blk)
        grid = blk.grid
        if cells is None:
            cells = bucket_cells(grid, n_buckets)
        cells = np.asarray(cells, dtype=int)
        lam = market.market_price_of_risk(grid)
        Fv = Ff.value(blk)
        if np.any(Fv <= 0.0):
            raise ValueError("F must be bounded away from 0")
        NTf = exponential_martingale(lam, grid)
        Y = Smooth((n_sym / F_SYM) ** e, [NTf, Ff], (n_sym, F_SYM))
        dens = girsanov_density(market, blk)
        parts["NT"].append(dens.NT)
        parts["Y"].append(Y.value(blk))
        parts["DY"].append(Y.dt_all(blk)[:, cells])
        parts["Nt"].append(dens.N[:, cells])
        parts["cols"].append(np.stack([np.column_stack(girsanov_features(blk, dens, int(k), names))
                                       for k in cells], axis=1))
    NT, Yv = np.concatenate(parts["NT"]), np.concatenate(parts["Y"])
    DY, Nt = np.concatenate(parts["DY"]), np.concatenate(parts["Nt"])
    cols = np.concatenate(parts["cols"])
    beta = market.beta_cells(grid)[cells]
    n, nb = DY.shape
    frac = np.empty((n, nb))
    den_fit = np.empty((n, nb))
    for j in range(nb):
        c = [cols[:, j, i] for i in range(cols.shape[2])]
        num = _regress(NT * DY[:, j], c, degree)
        den_fit[:, j] = _regress(NT * Yv, c, degree)
        frac[:, j] = num / (beta[j] * den_fit[:, j])
    # budget E[N_T (M0 N_T / F)^e] = x0, i.e. E[N_T M0^e Y] = x0
    M0_closed = (x0 / float(np.mean(NT * Yv))) ** (gamma - 1.0)
    Finv_e = Yv / NT**e         # F^{-e}
    M0 = solve_M0(lambda m: m**e * Finv_e, NT, x0)
    scale = M0**e
    oracle = market.merton_fraction() if (_constant_market(market) and not isinstance(F, Functional)) else None
    t = grid.t[cells]
    return PowerUtilitySolution(t, cells, frac, frac.mean(axis=0), frac.std(axis=0, ddof=1) / np.sqrt(n),
                                oracle, M0, M0_closed, scale * Yv, scale * den_fit / Nt)


@dataclass(frozen=True)
class FractionSearch:
    fractions: np.ndarray
    J: np.ndarray
    stderr: np.ndarray

    @property
    def argmax(self) -> float:
        return float(self.fractions[int(np.argmax(self.J))])


def fraction_grid_search(market: MarketModel, paths: Paths, fractions, x0: float = 1.0) -> FractionSearch:
    """Monte Carlo ``E[U(X(T)) F]`` over constant fractions ``u = pi X`` (exact scheme, common noise)."""
    coeffs = market.coefficients()
    J, se = [], []
    for pi in np.asarray(fractions, dtype=float):
        ctl = Control.affine(0.0, pi)
        e = estimate(pathwise_performance(coeffs, simulate_state(coeffs, ctl, paths, x0, "exact"), paths))
        J.append(e.value)
        se.append(e.stderr)
    return FractionSearch(np.asarray(fractions, dtype=float), np.array(J), np.array(se))


# --- criticality --------------------------------------------------------------------

def portfolio_criticality(market: MarketModel, control: Control, filtration: FiltrationSpec, source,
                          x0: float = 1.0, cells=None, n_buckets: int = 20, scheme: str = "exact") -> CriticalityReport:
    """Per-bucket test of ``E[p (alpha - rho) + beta D_t p + sum D_{t,z} p zeta_jump lambda | E_t] = 0``."""
    coeffs = market.coefficients()
    hs, obs = [], []
    grid = None
    for blk in _blocks(source):
        market.check_jumps(blk)
        grid = blk.grid
        if cells is None:
            cells = bucket_cells(grid, n_buckets)
        cells = np.asarray(cells, dtype=int)
        state = simulate_state(coeffs, control, blk, x0, scheme)
        adj = compute_adjoint(coeffs, control, blk, state, cells=cells)
        hs.append(np.column_stack([hamiltonian_gradient_paths(adj, coeffs, blk, state, int(k)) for k in cells]))
        obs.append([filtration.observables(blk, int(k), state.X) for k in cells])
    h = np.concatenate(hs)
    report = CriticalityReport()
    for j, k in enumerate(cells):
        cols = [np.concatenate([o[j][i] for o in obs]) for i in range(len(obs[0][j]))]
        zt = zero_test(h[:, j], polynomial_features(cols, filtration.degree, n=h.shape[0]))
        report.buckets.append(BucketStat(float(grid.t[k]), int(k), zt.estimate, zt.stderr, zt.rms_fitted, zt.z))
    return report


def merton_control(market: MarketModel) -> Control:
    return Control.affine(0.0, market.merton_fraction())

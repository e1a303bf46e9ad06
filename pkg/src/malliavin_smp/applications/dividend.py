"""Optimal dividend / harvesting rate.

State ``dX = (b0 + b1 X - c) dt + (s0 + s1 X) dB + sum_z (h0 + h1 X) dÑ_z`` and
reward ``E[int xi U(c) dt + zeta X(T)]``. The adjoint collapses to ``K = zeta``
and the first-order condition reads ``U'(c) E[xi | E_t] = E[p | E_t]``.
"""
from __future__ import annotations

import csv
import dataclasses
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..adjoint import AdjointSample, compute_adjoint
from ..malliavin import Functional, lift
from ..noise import Paths
from ..regression import RankWarning, conditional_expectation
from ..sde import (CoefficientSet, Control, Estimate, FiltrationSpec, _as_t_fn, estimate, linear_coefficients,
                   pathwise_performance, simulate_state)
from .utility import Utility


@dataclass(frozen=True)
class DividendModel:
    """Coefficients are constants or deterministic functions of ``t`` (``(t, z)`` for theta).

    ``zeta`` is a constant or a Malliavin-engine functional of the noise.
    """

    b0: float | Callable = 0.0
    b1: float | Callable = 0.0
    s0: float | Callable = 0.0
    s1: float | Callable = 0.0
    h0: float | Callable = 0.0
    h1: float | Callable = 0.0
    xi: float | Callable = 1.0
    zeta: float | Functional = 1.0
    utility: Utility = field(default_factory=Utility.log)

    @property
    def zeta_functional(self) -> Functional:
        return lift(self.zeta)

    def coefficients(self) -> CoefficientSet:
        base = linear_coefficients(b=(self.b0, self.b1, -1.0), sigma=(self.s0, self.s1, 0.0),
                                   theta=(self.h0, self.h1, 0.0))
        xi, U, zeta = _as_t_fn(self.xi), self.utility, self.zeta_functional

        def f(t, x, c, ctx=None):
            return xi(t) * U.U(c) + 0.0 * np.asarray(x, dtype=float)

        def f_u(t, x, c, ctx=None):
            return xi(t) * U.dU(c) + 0.0 * np.asarray(x, dtype=float)

        def g(x, ctx):
            return zeta.value(ctx.paths) * x

        def g_x(x, ctx):
            return zeta.value(ctx.paths) + 0.0 * x

        return dataclasses.replace(base, f=f, f_u=f_u, f_x=lambda t, x, c, ctx=None: 0.0 * np.asarray(x, dtype=float),
                                   g=g, g_x=g_x, terminal_gradient=lambda XT: zeta)


def dividend_p(model: DividendModel, paths: Paths, x0: float = 1.0, control: Control | None = None,
               cells=None) -> AdjointSample:
    """Adjoint sample with ``p(t) = zeta + int_t^T (zeta b1 + D_r zeta s1 + sum D_{r,z} zeta h1 lambda) G dr``.

    ``p`` does not depend on the dividend rate; ``control`` only fixes the state
    used for bookkeeping (constant rate 1 by default).
    """
    coeffs = model.coefficients()
    control = Control.constant(1.0, bounds=(0.0, np.inf)) if control is None else control
    state = simulate_state(coeffs, control, paths, x0)
    return compute_adjoint(coeffs, control, paths, state, cells=cells, with_qr=cells is not None)


@dataclass(frozen=True, eq=False)
class DividendSolution:
    """Candidate rate ``c(t)`` per path from the first-order condition.

    Paths where the ratio ``E[p | E_t] / E[xi | E_t]`` is not positive have no
    admissible solution; they are NaN in ``c`` and listed in ``infeasible``.
    """

    paths: Paths
    c: np.ndarray                 # (n, N+1)
    cond_p: np.ndarray            # (n, N+1)
    infeasible: list              # (k, t, number of paths)

    @property
    def feasible(self) -> bool:
        return not self.infeasible

    def control(self) -> Control:
        if not self.feasible:
            raise ValueError("first-order condition has infeasible buckets")
        return Control.from_array(self.c, self.paths.path_ids, bounds=(0.0, np.inf))

    def bucket_means(self) -> np.ndarray:
        return np.nanmean(self.c, axis=0)

    def to_csv(self, path: str | Path, oracle=None) -> None:
        grid = self.paths.grid
        m = self.bucket_means()
        se = np.nanstd(self.c, axis=0, ddof=1) / np.sqrt(np.sum(np.isfinite(self.c), axis=0).clip(1))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "estimate", "stderr", "oracle", "verdict"])
            for k, t in enumerate(grid.t):
                o = "" if oracle is None else repr(float(oracle[k]))
                verdict = "" if oracle is None else ("pass" if abs(m[k] - oracle[k]) <= 1e-3 else "fail")
                w.writerow([repr(float(t)), repr(float(m[k])), repr(float(se[k])), o, verdict])


def dividend_foc_solve(model: DividendModel, filtration: FiltrationSpec, paths: Paths, x0: float = 1.0,
                       adjoint: AdjointSample | None = None) -> DividendSolution:
    """``c(t) = (U')^{-1}(E[p(t) | E_t] / E[xi(t) | E_t])`` with regression conditional expectations.

    ``xi`` is deterministic so its conditional expectation is itself. Regression
    features are noise observables only, since ``p`` does not depend on ``c``.
    """
    adj = dividend_p(model, paths, x0) if adjoint is None else adjoint
    grid = paths.grid
    xi = np.broadcast_to(np.asarray(_as_t_fn(model.xi)(grid.t), dtype=float), grid.t.shape)
    n = len(paths)
    cond = np.empty((n, grid.n_cells + 1))
    c = np.full((n, grid.n_cells + 1), np.nan)
    infeasible = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankWarning)
        for k in range(grid.n_cells + 1):
            cols = filtration.observables(paths, k)
            cond[:, k] = conditional_expectation(adj.p[:, k], cols, filtration.degree)
    ratio = cond / xi
    ok = ratio > 0
    for k in range(grid.n_cells + 1):
        if not np.all(ok[:, k]):
            infeasible.append((k, float(grid.t[k]), int(np.sum(~ok[:, k]))))
    c[ok] = model.utility.dU_inv(ratio[ok])
    return DividendSolution(paths, c, cond, infeasible)


def dividend_performance(model: DividendModel, control: Control, paths: Paths, x0: float = 1.0) -> Estimate:
    coeffs = model.coefficients()
    state = simulate_state(coeffs, control, paths, x0)
    return estimate(pathwise_performance(coeffs, state, paths))


@dataclass(frozen=True)
class GridSearch:
    values: np.ndarray
    J: np.ndarray
    stderr: np.ndarray

    @property
    def argmax(self) -> float:
        return float(self.values[int(np.argmax(self.J))])


def dividend_grid_search(model: DividendModel, paths: Paths, values, x0: float = 1.0) -> GridSearch:
    """Monte Carlo ``J`` over constant rates on common random numbers."""
    values = np.asarray(values, dtype=float)
    est = [dividend_performance(model, Control.constant(v, bounds=(0.0, np.inf)), paths, x0) for v in values]
    return GridSearch(values, np.array([e.value for e in est]), np.array([e.stderr for e in est]))

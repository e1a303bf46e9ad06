"""Explicit adjoint processes K, p, q, r and the stochastic Hamiltonian.

Everything is sampled on grid points. Malliavin derivatives "at time s" use the
cell starting at ``s``; at ``s = T`` the last cell stands in for the left limit.
The running-cost gradient ``f_x`` must be deterministic along the paths (it may
depend on time), which covers every model shipped here; other cases raise
:class:`UnsupportedFunctional`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linear import LinearTables
from .malliavin import (Constant, Flow, Functional, Product, State, Sum, UnsupportedFunctional)
from .noise import Paths, TimeGrid
from .sde import (CoefficientSet, Control, GFlow, StepContext, Trajectory, partial_tables,
                  state_tables, stochastic_exponential_G)


class _SampledTerminal(Functional):
    """Terminal state known only by value (non-linear dynamics): derivatives are unsupported."""

    def __init__(self, X: np.ndarray):
        self.X = X

    def value(self, paths):
        return self.X.copy()

    def dt_functional(self, k):
        raise UnsupportedFunctional("terminal state of a non-linear SDE")

    def dz_functional(self, k, i):
        raise UnsupportedFunctional("terminal state of a non-linear SDE")

    def dt_all(self, paths):
        raise UnsupportedFunctional("terminal state of a non-linear SDE")

    def dz_all(self, paths):
        raise UnsupportedFunctional("terminal state of a non-linear SDE")


def terminal_state_functional(coeffs: CoefficientSet, control: Control, paths: Paths,
                              state: Trajectory) -> Functional:
    """``X(T)`` as an engine functional consistent with ``state``."""
    if coeffs.linear is None:
        return _SampledTerminal(state.X[:, -1])
    tables = state.tables if state.tables is not None else state_tables(coeffs, control, paths)
    XT = State(tables, state.scheme, paths.grid.n_cells, state.x0)
    v = XT.value(paths)
    if not np.allclose(v, state.X[:, -1], rtol=1e-10, atol=1e-12):
        raise ValueError("state trajectory does not match the linear tables of this control")
    return XT


@dataclass(frozen=True, eq=False)
class KParts:
    """``K(t) = g'(X(T)) + int_t^T f_x ds`` with its derivatives on grid points."""

    K: np.ndarray            # (n, N+1)
    DtK: np.ndarray          # (n, N+1)
    DzK: np.ndarray          # (n, N+1, A)
    terminal: Functional     # g'(X(T))
    tail: np.ndarray         # (N+1,) deterministic running part
    fx: np.ndarray           # (N+1,) running-cost gradient on grid points


def _deterministic_fx(coeffs: CoefficientSet, paths: Paths, state: Trajectory) -> np.ndarray:
    grid = paths.grid
    fx = np.empty(grid.n_cells + 1)
    for k in range(grid.n_cells + 1):
        v = np.broadcast_to(np.asarray(coeffs.f_x(float(grid.t[k]), state.X[:, k], state.u[:, k],
                                                   StepContext(paths, k)), dtype=float), (len(paths),))
        scale = max(1.0, float(np.max(np.abs(v))))
        if np.ptp(v) > 1e-12 * scale:
            raise UnsupportedFunctional("running-cost gradient f_x depends on the path")
        fx[k] = v[0]
    return fx


def running_tail(fx: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Trapezoid ``int_{t_k}^T fx ds`` for every k, by backward partial sums."""
    dt = grid.dt
    tail = np.zeros(grid.n_cells + 1)
    for k in range(grid.n_cells - 1, -1, -1):
        tail[k] = tail[k + 1] + 0.5 * dt[k] * (fx[k] + fx[k + 1])
    return tail


def _at_points(cells_arr: np.ndarray) -> np.ndarray:
    """Extend a per-cell array (n, N, ...) to grid points by repeating the last cell."""
    return np.concatenate([cells_arr, cells_arr[:, -1:]], axis=1)


def compute_K(coeffs: CoefficientSet, control: Control, paths: Paths, state: Trajectory) -> KParts:
    if coeffs.terminal_gradient is None:
        raise UnsupportedFunctional("coefficient set has no terminal_gradient functional")
    XT = terminal_state_functional(coeffs, control, paths, state)
    term = coeffs.terminal_gradient(XT)
    fx = _deterministic_fx(coeffs, paths, state)
    tail = running_tail(fx, paths.grid)
    gp = term.value(paths)
    K = gp[:, None] + tail[None, :]
    DtK = _at_points(term.dt_all(paths))
    DzK = _at_points(term.dz_all(paths))
    return KParts(K, DtK, DzK, term, tail, fx)


def _partials_on_points(coeffs: CoefficientSet, paths: Paths, state: Trajectory):
    grid, model = paths.grid, paths.model
    n = len(paths)
    bx = np.empty((n, grid.n_cells + 1))
    sx = np.empty((n, grid.n_cells + 1))
    tx = np.empty((n, grid.n_cells + 1, model.n_atoms))
    for k in range(grid.n_cells + 1):
        t, ctx = float(grid.t[k]), StepContext(paths, k)
        x, u = state.X[:, k], state.u[:, k]
        bx[:, k] = coeffs.b_x(t, x, u, ctx)
        sx[:, k] = coeffs.sigma_x(t, x, u, ctx)
        for i, z in enumerate(model.sizes):
            tx[:, k, i] = coeffs.theta_x(t, x, u, z, ctx)
    return bx, sx, tx


def compute_H0_x(kparts: KParts, coeffs: CoefficientSet, state: Trajectory, paths: Paths) -> np.ndarray:
    """``dH0/dx(s) = K b_x + D_s K sigma_x + sum_i D_{s,z_i} K theta_x lambda_i`` with K frozen."""
    bx, sx, tx = _partials_on_points(coeffs, paths, state)
    lam = paths.model.lam
    return kparts.K * bx + kparts.DtK * sx + np.sum(kparts.DzK * tx * lam, axis=-1)


def compute_p(K: np.ndarray, H0x: np.ndarray, G: GFlow, grid: TimeGrid) -> np.ndarray:
    """``p(t_k) = K(t_k) + int_{t_k}^T dH0/dx(s) G(t_k, s) ds`` by the trapezoid rule."""
    L = G.L
    shift = L.max(axis=1, keepdims=True)
    A = H0x * np.exp(L - shift)
    w = grid.trapezoid_weights()
    dt = grid.dt
    N = grid.n_cells
    p = K.copy()
    suffix = np.zeros(len(K))          # sum_{s > k} w_s A_s
    for k in range(N - 1, -1, -1):
        suffix = suffix + w[k + 1] * A[:, k + 1]
        p[:, k] += np.exp(shift[:, 0] - L[:, k]) * (suffix + 0.5 * dt[k] * A[:, k])
    return p


def _deterministic_partials(tables: LinearTables):
    if not tables.deterministic:
        raise UnsupportedFunctional("x-partials of the coefficients depend on the path")
    bx = np.append(tables.growth, tables.growth[-1])
    sx = np.append(tables.vol, tables.vol[-1])
    tx = np.vstack([tables.jump, tables.jump[-1:]])
    return bx, sx, tx


def compute_qr(kparts: KParts, coeffs: CoefficientSet, paths: Paths, state: Trajectory,
               H0x: np.ndarray, G: GFlow, cells=None) -> tuple[np.ndarray, np.ndarray]:
    """``q(t_k) = D_{t_k} p(t_k)`` and ``r(t_k, z) = D_{t_k, z} p(t_k)`` on the requested cells.

    Differentiates the assembled expression of ``p(t_k)`` term by term with the
    engine. Returns arrays on grid points with NaN outside ``cells``.
    """
    grid, model = paths.grid, paths.model
    n, N, A = len(paths), grid.n_cells, model.n_atoms
    cells = np.arange(N) if cells is None else np.asarray(sorted(set(int(c) for c in cells)), dtype=int)
    if np.any((cells < 0) | (cells >= N)):
        raise IndexError("q and r are available on cells 0..N-1")
    q = np.full((n, N + 1), np.nan)
    r = np.full((n, N + 1, A), np.nan)
    q[:, cells] = kparts.DtK[:, cells]
    r[:, cells] = kparts.DzK[:, cells]
    if not np.any(H0x) and not _has_partials(coeffs, paths, state):
        return q, r
    bx, sx, tx = _deterministic_partials(partial_tables(coeffs, paths, state))
    lam = model.lam
    term = kparts.terminal
    w = grid.trapezoid_weights()
    dt = grid.dt
    kmin = int(cells.min())
    for s in range(kmin, N + 1):
        ks = cells[cells <= s]
        sc = min(s, N - 1)
        # D_k of dH0/dx(s) for all k (Brownian) and add-one-jump (k, j)
        dHB = kparts.DtK[:, :N] * bx[s]
        dHJ = kparts.DzK[:, :N] * bx[s]
        if sx[s] != 0.0:
            Ds = term.dt_functional(sc)
            dHB = dHB + sx[s] * Ds.dt_all(paths)
            if A:
                dHJ = dHJ + sx[s] * Ds.dz_all(paths)
        for i in range(A):
            c = tx[s, i] * lam[i]
            if c != 0.0:
                Dsi = term.dz_functional(sc, i)
                dHB = dHB + c * Dsi.dt_all(paths)
                dHJ = dHJ + c * Dsi.dz_all(paths)
        Gks = np.exp(G.L[:, s][:, None] - G.L[:, ks])            # G(t_k, s), (n, len(ks))
        after = (ks < s).astype(float)
        wk = np.where(ks == s, 0.5 * dt[ks], w[s])
        Hs = H0x[:, s][:, None]
        q[:, ks] += wk * Gks * (dHB[:, ks] + sx[ks] * Hs * after)
        if A:
            grow = 1.0 + tx[ks] * after[:, None]                     # (len(ks), A)
            r[:, ks] += (wk[:, None] * Gks[:, :, None]) * (dHJ[:, ks] * grow + Hs[:, :, None] * tx[ks] * after[:, None])
    return q, r


def _has_partials(coeffs, paths, state) -> bool:
    bx, sx, tx = _partials_on_points(coeffs, paths, state)
    return bool(np.any(bx) or np.any(sx) or np.any(tx))


@dataclass(frozen=True, eq=False)
class AdjointSample:
    """Per-path adjoint quantities on grid points (``q``, ``r`` NaN outside the requested cells)."""

    grid: TimeGrid
    path_ids: np.ndarray
    K: np.ndarray
    DtK: np.ndarray
    DzK: np.ndarray
    H0x: np.ndarray
    p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    G: GFlow = field(repr=False)
    kparts: KParts = field(repr=False)

    def to_csv(self, path: str | Path) -> None:
        A = self.r.shape[-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path_id", "t", "K", "p", "q"] + [f"r_atom_{i}" for i in range(A)])
            for i, pid in enumerate(self.path_ids):
                for k, t in enumerate(self.grid.t):
                    w.writerow([int(pid), repr(float(t)), repr(float(self.K[i, k])), repr(float(self.p[i, k])),
                                repr(float(self.q[i, k]))] + [repr(float(self.r[i, k, a])) for a in range(A)])


def compute_adjoint(coeffs: CoefficientSet, control: Control, paths: Paths, state: Trajectory,
                    cells=None, with_qr: bool = True) -> AdjointSample:
    kp = compute_K(coeffs, control, paths, state)
    H0x = compute_H0_x(kp, coeffs, state, paths)
    G = stochastic_exponential_G(coeffs, control, paths, state)
    p = compute_p(kp.K, H0x, G, paths.grid)
    n, N, A = len(paths), paths.grid.n_cells, paths.model.n_atoms
    if with_qr:
        q, r = compute_qr(kp, coeffs, paths, state, H0x, G, cells)
    else:
        q, r = np.full((n, N + 1), np.nan), np.full((n, N + 1, A), np.nan)
    return AdjointSample(paths.grid, paths.path_ids.copy(), kp.K, kp.DtK, kp.DzK, H0x, p, q, r, G, kp)


def p_functional(kparts: KParts, coeffs: CoefficientSet, paths: Paths, state: Trajectory, k: int) -> Functional:
    """The assembled expression of ``p(t_k)`` as an engine functional (linear class).

    Used to cross-check :func:`compute_qr` and to run duality checks on ``p``.
    """
    tables = partial_tables(coeffs, paths, state)
    bx, sx, tx = _deterministic_partials(tables)
    grid, lam = paths.grid, paths.model.lam
    N = grid.n_cells
    term = kparts.terminal
    w = grid.trapezoid_weights(k)
    terms = [term, Constant(kparts.tail[k])]
    for s in range(k, N + 1):
        sc = min(s, N - 1)
        parts = []
        if bx[s] != 0.0:
            parts.append(Sum([term, Constant(kparts.tail[s])], [bx[s], bx[s]]))
        if sx[s] != 0.0:
            parts.append(Sum([term.dt_functional(sc)], [sx[s]]))
        for i in range(paths.model.n_atoms):
            if tx[s, i] != 0.0:
                parts.append(Sum([term.dz_functional(sc, i)], [tx[s, i] * lam[i]]))
        if parts and w[s] != 0.0:
            terms.append(Sum([Product([Sum(parts), Flow(tables, "exact", k, s)])], [w[s]]))
    return Sum(terms)


# --- Hamiltonian ---------------------------------------------------------------------

def H1(coeffs: CoefficientSet, model, t, x, u, p, q, r, ctx=None):
    """Markovian form ``f + p b + q sigma + sum_i r_i theta_i lambda_i``."""
    out = coeffs.f(t, x, u, ctx) + p * coeffs.b(t, x, u, ctx) + q * coeffs.sigma(t, x, u, ctx)
    r = np.asarray(r, dtype=float)
    for i, z in enumerate(model.sizes):
        out = out + r[..., i] * coeffs.theta(t, x, u, z, ctx) * model.lam[i]
    return out


def hamiltonian(coeffs: CoefficientSet, model, p, q, r, t, x, u, ctx=None):
    """``H(t, x, u, omega)`` with the adjoint values ``p(t), q(t), r(t, .)`` of one time."""
    return H1(coeffs, model, t, x, u, p, q, r, ctx)


def hamiltonian_at(adj: AdjointSample, coeffs: CoefficientSet, paths: Paths, k: int, x=None, u=None,
                   state: Trajectory | None = None) -> np.ndarray:
    """``H(t_k, x, u)`` along the paths; checks it equals ``H1`` fed with ``p(t_k), q(t_k), r(t_k)``."""
    t, ctx = float(paths.grid.t[k]), StepContext(paths, k)
    x = state.X[:, k] if x is None else x
    u = state.u[:, k] if u is None else u
    H = hamiltonian(coeffs, paths.model, adj.p[:, k], adj.q[:, k], adj.r[:, k], t, x, u, ctx)
    ref = H1(coeffs, paths.model, t, x, u, adj.p[:, k].copy(), adj.q[:, k].copy(), adj.r[:, k].copy(), ctx)
    assert np.array_equal(H, ref, equal_nan=True)
    return H


def hamiltonian_u_partial(coeffs: CoefficientSet, model, p, q, r, t, x, u, ctx=None):
    """``f_u + p b_u + q sigma_u + sum_i r_i theta_u lambda_i``."""
    out = coeffs.f_u(t, x, u, ctx) + p * coeffs.b_u(t, x, u, ctx) + q * coeffs.sigma_u(t, x, u, ctx)
    r = np.asarray(r, dtype=float)
    for i, z in enumerate(model.sizes):
        out = out + r[..., i] * coeffs.theta_u(t, x, u, z, ctx) * model.lam[i]
    return np.broadcast_to(np.asarray(out, dtype=float), np.shape(x)).copy()

"""Per-cell tables for SDEs that are affine in the state.

On cell ``k`` the state recursion is ``X[k+1] = M_k X[k] + S_k`` where the
one-cell multiplier ``M_k`` and source ``S_k`` depend only on that cell's noise.
Two schemes share this shape:

* ``"euler"``: ``M = 1 + growth dt + vol dB + sum_i jump_i dÑ_i`` and
  ``S = drift_src dt + vol_src dB + sum_i jump_src_i dÑ_i``.
* ``"exact"``: ``M = g`` is the stochastic exponential of the homogeneous part on
  the cell, and ``S = g * src`` comes from variation of constants with the
  sources frozen at the left endpoint. Homogeneous equations are solved exactly.

``M`` and ``S`` are kept as sympy expressions in the cell's noise so that the
Malliavin engine can differentiate them (``d/d dB`` and add-one-jump).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import sympy as sp

from .noise import LevyModel, Paths, TimeGrid

SCHEMES = ("euler", "exact")


class DomainError(ValueError):
    """A logarithm or power of a non-positive jump factor was requested."""


def _as_cells(value, grid: TimeGrid) -> np.ndarray:
    """Evaluate a constant or a function of t at the cell left points."""
    t = grid.t[:-1]
    if callable(value):
        out = np.asarray(value(t), dtype=float)
        return np.broadcast_to(out, t.shape).copy() if out.ndim <= 1 else out
    return np.full(t.shape, float(value))


def _as_cells_atoms(value, grid: TimeGrid, model: LevyModel) -> np.ndarray:
    t = grid.t[:-1]
    out = np.empty((t.size, model.n_atoms))
    for i, z in enumerate(model.sizes):
        if callable(value):
            out[:, i] = np.broadcast_to(np.asarray(value(t, z), dtype=float), t.shape)
        else:
            out[:, i] = float(value)
    return out


@dataclass(frozen=True, eq=False)
class LinearTables:
    """Cell-wise coefficients of ``dX = (drift_src + growth X) dt + (vol_src + vol X) dB
    + sum_i (jump_src_i + jump_i X) dÑ_i``.

    Arrays are ``(N,)`` / ``(N, A)`` when deterministic or ``(n, N)`` /
    ``(n, N, A)`` when they depend on the path.
    """

    grid: TimeGrid
    model: LevyModel
    growth: np.ndarray
    vol: np.ndarray
    jump: np.ndarray
    drift_src: np.ndarray
    vol_src: np.ndarray
    jump_src: np.ndarray

    @classmethod
    def build(cls, grid, model, growth=0.0, vol=0.0, jump=0.0,
              drift_src=0.0, vol_src=0.0, jump_src=0.0) -> "LinearTables":
        def cells(v):
            return v if isinstance(v, np.ndarray) and v.ndim >= 1 and v.shape[-1] == grid.n_cells \
                else _as_cells(v, grid)

        def atoms(v):
            if isinstance(v, np.ndarray) and v.ndim >= 2:
                return v
            return _as_cells_atoms(v, grid, model)

        return cls(grid, model, cells(growth), cells(vol), atoms(jump),
                   cells(drift_src), cells(vol_src), atoms(jump_src))

    @property
    def deterministic(self) -> bool:
        return (self.growth.ndim == 1 and self.vol.ndim == 1 and self.jump.ndim == 2
                and self.drift_src.ndim == 1 and self.vol_src.ndim == 1 and self.jump_src.ndim == 2)

    @property
    def homogeneous(self) -> bool:
        return not (np.any(self.drift_src) or np.any(self.vol_src) or np.any(self.jump_src))

    def homogeneous_part(self) -> "LinearTables":
        z = np.zeros(self.grid.n_cells)
        return LinearTables(self.grid, self.model, self.growth, self.vol, self.jump,
                            z, z, np.zeros((self.grid.n_cells, self.model.n_atoms)))

    def check_exact_domain(self):
        if np.any(1.0 + self.jump <= 0.0):
            bad = np.argwhere(1.0 + self.jump <= 0.0)[0]
            raise DomainError(f"1 + jump coefficient <= 0 at index {tuple(int(i) for i in bad)}")


# --- symbolic one-cell factors -------------------------------------------------

@lru_cache(maxsize=None)
def cell_symbols(n_atoms: int):
    dB, dt, growth, vol, a, c = sp.symbols("dB dt growth vol a c", real=True)
    dN = sp.symbols(f"dN0:{n_atoms}", real=True) if n_atoms else ()
    lam = sp.symbols(f"lam0:{n_atoms}", real=True) if n_atoms else ()
    jump = sp.symbols(f"jump0:{n_atoms}", real=True) if n_atoms else ()
    e = sp.symbols(f"e0:{n_atoms}", real=True) if n_atoms else ()
    return dict(dB=dB, dt=dt, growth=growth, vol=vol, a=a, c=c,
                dN=tuple(dN), lam=tuple(lam), jump=tuple(jump), e=tuple(e))


@lru_cache(maxsize=None)
def cell_factors(scheme: str, n_atoms: int) -> tuple[sp.Expr, sp.Expr]:
    """Symbolic ``(M, S)`` for one cell."""
    s = cell_symbols(n_atoms)
    dB, dt, growth, vol, a, c = s["dB"], s["dt"], s["growth"], s["vol"], s["a"], s["c"]
    comp = [dN - lam * dt for dN, lam in zip(s["dN"], s["lam"])]
    if scheme == "euler":
        M = 1 + growth * dt + vol * dB + sum(j * d for j, d in zip(s["jump"], comp))
        S = a * dt + c * dB + sum(e * d for e, d in zip(s["e"], comp))
        return sp.expand(M), sp.expand(S)
    if scheme == "exact":
        g = sp.exp((growth - vol**2 / 2) * dt + vol * dB - sum(j * l * dt for j, l in zip(s["jump"], s["lam"])))
        for j, dN in zip(s["jump"], s["dN"]):
            g = g * (1 + j) ** dN
        src = (a - vol * c - sum(e * l for e, l in zip(s["e"], s["lam"]))) * dt + c * dB
        src = src + sum(e / (1 + j) * dN for e, j, dN in zip(s["e"], s["jump"], s["dN"]))
        return g, g * src
    raise ValueError(f"unknown scheme {scheme!r}")


def add_one_jump(expr: sp.Expr, atom: int, n_atoms: int) -> sp.Expr:
    dN = cell_symbols(n_atoms)["dN"][atom]
    return expr.subs(dN, dN + 1) - expr


def d_dB(expr: sp.Expr, n_atoms: int) -> sp.Expr:
    return sp.diff(expr, cell_symbols(n_atoms)["dB"])


@lru_cache(maxsize=None)
def _compiled(expr: sp.Expr, n_atoms: int):
    s = cell_symbols(n_atoms)
    args = [s["dB"], s["dt"], s["growth"], s["vol"], s["a"], s["c"],
            *s["dN"], *s["lam"], *s["jump"], *s["e"]]
    return sp.lambdify(args, expr, modules="numpy")


def _cell_args(tables: LinearTables, paths: Paths, cells):
    """Arguments for a compiled cell expression on the given cell index (or slice)."""
    A = tables.model.n_atoms
    dt = tables.grid.dt[cells]
    lam = tables.model.lam

    def col(arr):
        return arr[..., cells]

    def atom_col(arr, i):
        return arr[..., cells, i]

    args = [paths.dB[:, cells], dt, col(tables.growth), col(tables.vol),
            col(tables.drift_src), col(tables.vol_src)]
    args += [paths.counts[:, cells, i].astype(float) for i in range(A)]
    args += [lam[i] for i in range(A)]
    args += [atom_col(tables.jump, i) for i in range(A)]
    args += [atom_col(tables.jump_src, i) for i in range(A)]
    return args


def evaluate_cell_expr(expr: sp.Expr, tables: LinearTables, paths: Paths, cells=slice(None)) -> np.ndarray:
    """Evaluate a one-cell expression on all paths; shape (n,) for an int cell, (n, m) for a slice."""
    fn = _compiled(expr, tables.model.n_atoms)
    out = fn(*_cell_args(tables, paths, cells))
    shape = paths.dB[:, cells].shape
    return np.broadcast_to(np.asarray(out, dtype=float), shape)


def multipliers(tables: LinearTables, paths: Paths, scheme: str) -> tuple[np.ndarray, np.ndarray]:
    """``(M, S)`` on every cell, each of shape (n, N); cached on ``paths``."""
    key = ("MS", id(tables), scheme)
    hit = paths.cache.get(key)
    if hit is not None and hit[0] is tables:
        return hit[1]
    if scheme == "exact":
        tables.check_exact_domain()
        M, S = _exact_multipliers(tables, paths)
    else:
        Mx, Sx = cell_factors(scheme, tables.model.n_atoms)
        M = np.array(evaluate_cell_expr(Mx, tables, paths))
        S = np.array(evaluate_cell_expr(Sx, tables, paths))
    paths.cache[key] = (tables, (M, S))
    return M, S


def _exact_multipliers(tables: LinearTables, paths: Paths):
    # Closed-form evaluation of the "exact" cell factors, avoiding (1+j)**dN overflow paths.
    dt = tables.grid.dt
    lam = tables.model.lam
    logg = (tables.growth - 0.5 * tables.vol**2) * dt + tables.vol * paths.dB
    src = (tables.drift_src - tables.vol * tables.vol_src) * dt + tables.vol_src * paths.dB
    if tables.model.n_atoms:
        log1p = np.log1p(tables.jump)
        logg = logg + np.sum(log1p * paths.counts - tables.jump * lam * dt[:, None], axis=-1)
        src = src - np.sum(tables.jump_src * lam, axis=-1) * dt
        src = src + np.sum(tables.jump_src / (1.0 + tables.jump) * paths.counts, axis=-1)
    g = np.exp(logg)
    return np.broadcast_to(g, paths.dB.shape), np.broadcast_to(g * src, paths.dB.shape)


def log_multipliers(tables: LinearTables, paths: Paths) -> np.ndarray:
    """Per-cell log of the exact homogeneous factor, shape (n, N)."""
    key = ("logg", id(tables))
    hit = paths.cache.get(key)
    if hit is not None and hit[0] is tables:
        return hit[1]
    tables.check_exact_domain()
    dt = tables.grid.dt
    lam = tables.model.lam
    logg = (tables.growth - 0.5 * tables.vol**2) * dt + tables.vol * paths.dB
    if tables.model.n_atoms:
        logg = logg + np.sum(np.log1p(tables.jump) * paths.counts - tables.jump * lam * dt[:, None], axis=-1)
    logg = np.broadcast_to(logg, paths.dB.shape)
    paths.cache[key] = (tables, logg)
    return logg


def trajectory(tables: LinearTables, paths: Paths, scheme: str, x0) -> np.ndarray:
    """State on all grid points, shape (n, N+1); cached per (tables, scheme, x0)."""
    key = ("traj", id(tables), scheme, float(x0))
    hit = paths.cache.get(key)
    if hit is not None and hit[0] is tables:
        return hit[1]
    M, S = multipliers(tables, paths, scheme)
    n, N = M.shape
    X = np.empty((n, N + 1))
    X[:, 0] = x0
    for k in range(N):
        X[:, k + 1] = M[:, k] * X[:, k] + S[:, k]
    paths.cache[key] = (tables, X)
    return X

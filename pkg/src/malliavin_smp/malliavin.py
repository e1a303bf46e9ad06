"""Malliavin derivatives of path functionals through a small descriptor algebra.

A :class:`Functional` knows how to evaluate itself on a batch of paths and how
to produce new functionals for its derivatives

* ``dt_functional(k)``: derivative in the Brownian direction on cell ``k``,
  i.e. ``d/d dB_k``;
* ``dz_functional(k, i)``: the add-one-jump difference for atom ``i`` on cell ``k``.

On the discrete noise these are exact: Gaussian integration by parts holds
cell by cell with ``dB_k ~ N(0, dt_k)`` and the Poisson Chen-Stein identity holds
for counts. ``dt_all`` and ``dz_all`` return all cells at once and are
vectorized for the built-in nodes. Functionals outside the supported classes
raise :class:`UnsupportedFunctional` instead of returning a wrong number.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import sympy as sp

from .linear import (LinearTables, add_one_jump, cell_factors, d_dB, evaluate_cell_expr,
                     log_multipliers, multipliers, trajectory)
from .noise import PathBundle, Paths, TimeGrid


class UnsupportedFunctional(NotImplementedError):
    """The derivative of this functional is not implemented; no value is guessed."""


def as_paths(x) -> Paths:
    if isinstance(x, Paths):
        return x
    if isinstance(x, PathBundle):
        return Paths(x.grid, x.model, x.dB[None], x.counts[None], np.array([x.path_id]))
    raise TypeError(f"expected Paths or PathBundle, got {type(x).__name__}")


class Functional:
    """Base class. Subclasses implement ``value``, ``dt_functional`` and ``dz_functional``."""

    is_zero = False

    def value(self, paths: Paths) -> np.ndarray:
        raise NotImplementedError

    def dt_functional(self, k: int) -> "Functional":
        raise UnsupportedFunctional(type(self).__name__)

    def dz_functional(self, k: int, i: int) -> "Functional":
        raise UnsupportedFunctional(type(self).__name__)

    def dt(self, paths: Paths, k: int) -> np.ndarray:
        return _full(self.dt_functional(k).value(paths), paths)

    def dz(self, paths: Paths, k: int, i: int) -> np.ndarray:
        return _full(self.dz_functional(k, i).value(paths), paths)

    def dt_all(self, paths: Paths) -> np.ndarray:
        """``D_{t_k} F`` for every cell, shape (n, N)."""
        return np.stack([self.dt(paths, k) for k in range(paths.grid.n_cells)], axis=1)

    def dz_all(self, paths: Paths) -> np.ndarray:
        """``D_{t_k, z_i} F`` for every cell and atom, shape (n, N, A)."""
        N, A = paths.grid.n_cells, paths.model.n_atoms
        out = np.zeros((len(paths), N, A))
        for k in range(N):
            for i in range(A):
                out[:, k, i] = self.dz(paths, k, i)
        return out

    # arithmetic sugar
    def __add__(self, other):
        return Sum([self, lift(other)])

    __radd__ = __add__

    def __sub__(self, other):
        return Sum([self, lift(other)], [1.0, -1.0])

    def __rsub__(self, other):
        return Sum([lift(other), self], [1.0, -1.0])

    def __neg__(self):
        return Sum([self], [-1.0])

    def __mul__(self, other):
        return Product([self, lift(other)])

    __rmul__ = __mul__


def _full(v, paths: Paths) -> np.ndarray:
    return np.broadcast_to(np.asarray(v, dtype=float), (len(paths),)).copy()


def lift(x) -> Functional:
    return x if isinstance(x, Functional) else Constant(float(x))


class Constant(Functional):
    def __init__(self, c: float):
        self.c = float(c)
        self.is_zero = self.c == 0.0

    def value(self, paths):
        return np.full(len(paths), self.c)

    def dt_functional(self, k):
        return ZERO

    def dz_functional(self, k, i):
        return ZERO

    def dt_all(self, paths):
        return np.zeros(paths.dB.shape)

    def dz_all(self, paths):
        return np.zeros(paths.counts.shape)

    def __repr__(self):
        return f"Constant({self.c})"


ZERO = Constant(0.0)


def _cells_range(grid: TimeGrid, start, stop):
    stop = grid.n_cells if stop is None else stop
    if not 0 <= start <= stop <= grid.n_cells:
        raise IndexError(f"cell range [{start}, {stop}) outside grid")
    return start, stop


class WienerIntegral(Functional):
    """``sum_k f_k dB_k`` over cells ``[start, stop)`` with deterministic ``f``."""

    def __init__(self, f, grid: TimeGrid, start: int = 0, stop: int | None = None):
        f = np.asarray(f(grid.t[:-1]) if callable(f) else f, dtype=float)
        self.f = np.broadcast_to(f, (grid.n_cells,)).copy()
        self.grid = grid
        self.start, self.stop = _cells_range(grid, start, stop)

    def value(self, paths):
        s = slice(self.start, self.stop)
        return paths.dB[:, s] @ self.f[s]

    def dt_functional(self, k):
        return Constant(self.f[k]) if self.start <= k < self.stop else ZERO

    def dz_functional(self, k, i):
        return ZERO

    def dt_all(self, paths):
        out = np.zeros(paths.dB.shape)
        out[:, self.start:self.stop] = self.f[self.start:self.stop]
        return out

    def dz_all(self, paths):
        return np.zeros(paths.counts.shape)


class PoissonIntegral(Functional):
    """``sum_{k,i} f_{k,i} dÑ_{k,i}`` over cells ``[start, stop)``; ``f`` has shape (N, A)."""

    def __init__(self, f, grid: TimeGrid, start: int = 0, stop: int | None = None):
        self.f = np.asarray(f, dtype=float)
        if self.f.ndim != 2 or self.f.shape[0] != grid.n_cells:
            raise ValueError("PoissonIntegral needs an (N, A) kernel")
        self.grid = grid
        self.start, self.stop = _cells_range(grid, start, stop)

    def value(self, paths):
        s = slice(self.start, self.stop)
        return np.einsum("nka,ka->n", paths.dN_tilde[:, s], self.f[s])

    def dt_functional(self, k):
        return ZERO

    def dz_functional(self, k, i):
        return Constant(self.f[k, i]) if self.start <= k < self.stop else ZERO

    def dt_all(self, paths):
        return np.zeros(paths.dB.shape)

    def dz_all(self, paths):
        out = np.zeros(paths.counts.shape)
        out[:, self.start:self.stop] = self.f[self.start:self.stop]
        return out


def brownian_at(grid: TimeGrid, j: int) -> WienerIntegral:
    """``B(t_j)``."""
    return WienerIntegral(np.ones(grid.n_cells), grid, 0, j)


def compensated_count_at(grid: TimeGrid, n_atoms: int, atom: int, j: int) -> PoissonIntegral:
    """``Ñ_atom(t_j)``."""
    f = np.zeros((grid.n_cells, n_atoms))
    f[:, atom] = 1.0
    return PoissonIntegral(f, grid, 0, j)


class Sum(Functional):
    def __init__(self, terms, coeffs=None):
        self.terms = [lift(t) for t in terms]
        self.coeffs = [1.0] * len(self.terms) if coeffs is None else [float(c) for c in coeffs]

    def value(self, paths):
        out = np.zeros(len(paths))
        for c, t in zip(self.coeffs, self.terms):
            out = out + c * t.value(paths)
        return out

    def _derive(self, parts):
        keep = [(c, p) for c, p in zip(self.coeffs, parts) if not p.is_zero]
        if not keep:
            return ZERO
        return Sum([p for _, p in keep], [c for c, _ in keep])

    def dt_functional(self, k):
        return self._derive([t.dt_functional(k) for t in self.terms])

    def dz_functional(self, k, i):
        return self._derive([t.dz_functional(k, i) for t in self.terms])

    def dt_all(self, paths):
        return sum(c * t.dt_all(paths) for c, t in zip(self.coeffs, self.terms))

    def dz_all(self, paths):
        return sum(c * t.dz_all(paths) for c, t in zip(self.coeffs, self.terms))


class Product(Functional):
    def __init__(self, factors):
        self.factors = [lift(f) for f in factors]
        self.is_zero = any(f.is_zero for f in self.factors)

    def value(self, paths):
        out = np.ones(len(paths))
        for f in self.factors:
            out = out * f.value(paths)
        return out

    def dt_functional(self, k):
        terms = []
        for i, f in enumerate(self.factors):
            d = f.dt_functional(k)
            if not d.is_zero:
                terms.append(Product(self.factors[:i] + [d] + self.factors[i + 1:]))
        return Sum(terms) if terms else ZERO

    def dz_functional(self, k, i):
        ds = [f.dz_functional(k, i) for f in self.factors]
        if all(d.is_zero for d in ds):
            return ZERO
        shifted = [f if d.is_zero else Sum([f, d]) for f, d in zip(self.factors, ds)]
        return Sum([Product(shifted), self], [1.0, -1.0])

    def dt_all(self, paths):
        vals = [f.value(paths) for f in self.factors]
        out = np.zeros(paths.dB.shape)
        for i, f in enumerate(self.factors):
            others = np.ones(len(paths))
            for j, v in enumerate(vals):
                if j != i:
                    others = others * v
            out += others[:, None] * f.dt_all(paths)
        return out

    def dz_all(self, paths):
        shifted = np.ones(paths.counts.shape)
        base = np.ones(len(paths))
        for f in self.factors:
            v = f.value(paths)
            shifted = shifted * (v[:, None, None] + f.dz_all(paths))
            base = base * v
        return shifted - base[:, None, None]


@lru_cache(maxsize=None)
def _lambdify(expr: sp.Expr, symbols: tuple):
    return sp.lambdify(symbols, expr, modules="numpy")


class Smooth(Functional):
    """``phi(F_1, ..., F_m)`` for a sympy expression ``phi`` in ``symbols``."""

    def __init__(self, expr, children, symbols=None):
        self.children = [lift(c) for c in children]
        if symbols is None:
            symbols = sp.symbols(f"x0:{len(self.children)}", real=True) if self.children else ()
        self.symbols = tuple(symbols)
        if len(self.symbols) != len(self.children):
            raise ValueError("one symbol per child is required")
        self.expr = sp.sympify(expr)

    def _eval(self, expr, vals):
        out = _lambdify(expr, self.symbols)(*vals)
        return np.asarray(out, dtype=float)

    def value(self, paths):
        vals = [c.value(paths) for c in self.children]
        return _full(self._eval(self.expr, vals), paths)

    def dt_functional(self, k):
        terms = []
        for s, c in zip(self.symbols, self.children):
            d = c.dt_functional(k)
            if not d.is_zero:
                terms.append(Product([Smooth(sp.diff(self.expr, s), self.children, self.symbols), d]))
        return Sum(terms) if terms else ZERO

    def dz_functional(self, k, i):
        ds = [c.dz_functional(k, i) for c in self.children]
        if all(d.is_zero for d in ds):
            return ZERO
        shifted = [c if d.is_zero else Sum([c, d]) for c, d in zip(self.children, ds)]
        return Sum([Smooth(self.expr, shifted, self.symbols), self], [1.0, -1.0])

    def dt_all(self, paths):
        vals = [c.value(paths) for c in self.children]
        out = np.zeros(paths.dB.shape)
        for s, c in zip(self.symbols, self.children):
            d = c.dt_all(paths)
            if np.any(d):
                out += _full(self._eval(sp.diff(self.expr, s), vals), paths)[:, None] * d
        return out

    def dz_all(self, paths):
        vals = [c.value(paths) for c in self.children]
        shifted = [v[:, None, None] + c.dz_all(paths) for v, c in zip(vals, self.children)]
        base = _full(self._eval(self.expr, vals), paths)
        return np.broadcast_to(self._eval(self.expr, shifted), paths.counts.shape) - base[:, None, None]


def exponential_martingale(theta, grid: TimeGrid) -> Smooth:
    """``exp(-sum theta_k dB_k - 1/2 sum theta_k^2 dt_k)`` for deterministic ``theta``."""
    w = WienerIntegral(theta, grid)
    c = 0.5 * float(np.sum(w.f**2 * grid.dt))
    x = sp.Symbol("x0", real=True)
    return Smooth(sp.exp(-x - c), [w], (x,))


# --- linear state, flows and one-cell factors ----------------------------------

def _require_deterministic(tables: LinearTables):
    if not tables.deterministic:
        raise UnsupportedFunctional(
            "coefficients depend on the path; their own Malliavin derivatives are not tracked")


class CellFactor(Functional):
    """A sympy expression of one cell's noise and coefficients (see :mod:`.linear`)."""

    def __init__(self, tables: LinearTables, k: int, expr: sp.Expr):
        self.tables, self.k, self.expr = tables, int(k), expr
        self.is_zero = expr == 0

    def value(self, paths):
        return _full(evaluate_cell_expr(self.expr, self.tables, paths, self.k), paths)

    def dt_functional(self, l):
        _require_deterministic(self.tables)
        if l != self.k:
            return ZERO
        d = d_dB(self.expr, self.tables.model.n_atoms)
        return ZERO if d == 0 else CellFactor(self.tables, self.k, d)

    def dz_functional(self, l, i):
        _require_deterministic(self.tables)
        if l != self.k:
            return ZERO
        d = add_one_jump(self.expr, i, self.tables.model.n_atoms)
        return ZERO if d == 0 else CellFactor(self.tables, self.k, d)

    def dt_all(self, paths):
        out = np.zeros(paths.dB.shape)
        out[:, self.k] = self.dt(paths, self.k)
        return out

    def dz_all(self, paths):
        out = np.zeros(paths.counts.shape)
        for i in range(paths.model.n_atoms):
            out[:, self.k, i] = self.dz(paths, self.k, i)
        return out


def _derived_tables(tables: LinearTables, paths: Paths, scheme: str):
    """``dM, dS`` (n, N) and ``jM, jS`` (n, N, A) for all cells; cached on ``paths``."""
    key = ("dMS", id(tables), scheme)
    hit = paths.cache.get(key)
    if hit is not None and hit[0] is tables:
        return hit[1]
    A = tables.model.n_atoms
    M, S = cell_factors(scheme, A)
    dM = np.array(evaluate_cell_expr(d_dB(M, A), tables, paths))
    dS = np.array(evaluate_cell_expr(d_dB(S, A), tables, paths))
    jM = np.zeros(paths.counts.shape)
    jS = np.zeros(paths.counts.shape)
    for i in range(A):
        jM[:, :, i] = evaluate_cell_expr(add_one_jump(M, i, A), tables, paths)
        jS[:, :, i] = evaluate_cell_expr(add_one_jump(S, i, A), tables, paths)
    out = (dM, dS, jM, jS)
    paths.cache[key] = (tables, out)
    return out


class Flow(Functional):
    """Product of one-cell multipliers ``M_a ... M_{b-1}`` (identity when ``a == b``)."""

    def __init__(self, tables: LinearTables, scheme: str, a: int, b: int):
        if not 0 <= a <= b <= tables.grid.n_cells:
            raise IndexError(f"flow range [{a}, {b}) outside grid")
        self.tables, self.scheme, self.a, self.b = tables, scheme, int(a), int(b)

    def value(self, paths):
        if self.a == self.b:
            return np.ones(len(paths))
        if self.scheme == "exact":
            L = log_multipliers(self.tables, paths)
            return np.exp(L[:, self.a:self.b].sum(axis=1))
        M, _ = multipliers(self.tables, paths, self.scheme)
        return np.prod(M[:, self.a:self.b], axis=1)

    def _cell_expr(self, l, jump_atom=None):
        A = self.tables.model.n_atoms
        M, _ = cell_factors(self.scheme, A)
        return d_dB(M, A) if jump_atom is None else add_one_jump(M, jump_atom, A)

    def dt_functional(self, l):
        _require_deterministic(self.tables)
        if not self.a <= l < self.b:
            return ZERO
        if self.scheme == "exact":
            return Product([Constant(self.tables.vol[l]), self])
        return Product([Flow(self.tables, self.scheme, self.a, l), CellFactor(self.tables, l, self._cell_expr(l)),
                        Flow(self.tables, self.scheme, l + 1, self.b)])

    def dz_functional(self, l, i):
        _require_deterministic(self.tables)
        if not self.a <= l < self.b:
            return ZERO
        if self.scheme == "exact":
            return Product([Constant(self.tables.jump[l, i]), self])
        return Product([Flow(self.tables, self.scheme, self.a, l), CellFactor(self.tables, l, self._cell_expr(l, i)),
                        Flow(self.tables, self.scheme, l + 1, self.b)])

    def _around(self, paths):
        """``Phi(a, l) * Phi(l+1, b)`` for every ``l`` in ``[a, b)``, without division."""
        M, _ = multipliers(self.tables, paths, self.scheme)
        seg = M[:, self.a:self.b]
        n, m = seg.shape
        before = np.ones((n, m))
        after = np.ones((n, m))
        if m > 1:
            before[:, 1:] = np.cumprod(seg[:, :-1], axis=1)
            after[:, :-1] = np.cumprod(seg[:, :0:-1], axis=1)[:, ::-1]
        return before * after

    def dt_all(self, paths):
        _require_deterministic(self.tables)
        out = np.zeros(paths.dB.shape)
        if self.a == self.b:
            return out
        dM, _, _, _ = _derived_tables(self.tables, paths, self.scheme)
        out[:, self.a:self.b] = self._around(paths) * dM[:, self.a:self.b]
        return out

    def dz_all(self, paths):
        _require_deterministic(self.tables)
        out = np.zeros(paths.counts.shape)
        if self.a == self.b:
            return out
        _, _, jM, _ = _derived_tables(self.tables, paths, self.scheme)
        out[:, self.a:self.b] = self._around(paths)[:, :, None] * jM[:, self.a:self.b]
        return out


class State(Functional):
    """``X(t_j)`` of the affine recursion ``X[k+1] = M_k X[k] + S_k``."""

    def __init__(self, tables: LinearTables, scheme: str, j: int, x0: float):
        if not 0 <= j <= tables.grid.n_cells:
            raise IndexError(f"state index {j} outside grid")
        self.tables, self.scheme, self.j, self.x0 = tables, scheme, int(j), float(x0)

    def value(self, paths):
        return trajectory(self.tables, paths, self.scheme, self.x0)[:, self.j].copy()

    def _derivative(self, k, atom=None):
        _require_deterministic(self.tables)
        if k >= self.j:
            return ZERO
        A = self.tables.model.n_atoms
        M, S = cell_factors(self.scheme, A)
        op = (lambda e: d_dB(e, A)) if atom is None else (lambda e: add_one_jump(e, atom, A))
        local = Sum([Product([CellFactor(self.tables, k, op(M)), State(self.tables, self.scheme, k, self.x0)]),
                     CellFactor(self.tables, k, op(S))])
        return Product([local, Flow(self.tables, self.scheme, k + 1, self.j)])

    def dt_functional(self, k):
        return self._derivative(k)

    def dz_functional(self, k, i):
        return self._derivative(k, i)

    def _suffix(self, paths):
        # R[:, k] = M_{k+1} ... M_{j-1}
        M, _ = multipliers(self.tables, paths, self.scheme)
        j = self.j
        R = np.ones((len(paths), j))
        if j > 1:
            R[:, :-1] = np.cumprod(M[:, j - 1:0:-1], axis=1)[:, ::-1]
        return R

    def dt_all(self, paths):
        _require_deterministic(self.tables)
        out = np.zeros(paths.dB.shape)
        if self.j == 0:
            return out
        dM, dS, _, _ = _derived_tables(self.tables, paths, self.scheme)
        X = trajectory(self.tables, paths, self.scheme, self.x0)
        j = self.j
        out[:, :j] = (dM[:, :j] * X[:, :j] + dS[:, :j]) * self._suffix(paths)
        return out

    def dz_all(self, paths):
        _require_deterministic(self.tables)
        out = np.zeros(paths.counts.shape)
        if self.j == 0:
            return out
        _, _, jM, jS = _derived_tables(self.tables, paths, self.scheme)
        X = trajectory(self.tables, paths, self.scheme, self.x0)
        j = self.j
        out[:, :j] = (jM[:, :j] * X[:, :j, None] + jS[:, :j]) * self._suffix(paths)[:, :, None]
        return out


# --- public helpers --------------------------------------------------------------

def _cell_of(grid: TimeGrid, t: float) -> int:
    if not 0.0 <= t <= grid.T:
        raise ValueError(f"time {t} outside [0, {grid.T}]")
    return min(grid.index_at_or_before(t), grid.n_cells - 1)


def derivative_Dt(F: Functional, paths, t: float) -> np.ndarray:
    """``D_t F`` on each path (cell containing ``t``)."""
    paths = as_paths(paths)
    return F.dt(paths, _cell_of(paths.grid, t))


def derivative_Dz(F: Functional, paths, t: float, z: float) -> np.ndarray:
    """``D_{t,z} F`` on each path; ``z`` must be one of the model's jump sizes."""
    paths = as_paths(paths)
    matches = np.nonzero(np.isclose(paths.model.z, z))[0]
    if matches.size == 0:
        raise ValueError(f"jump size {z} is not an atom of the Lévy measure")
    return F.dz(paths, _cell_of(paths.grid, t), int(matches[0]))


@dataclass(frozen=True)
class DualityResult:
    lhs: float
    rhs: float
    stderr: float

    @property
    def residual(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def z(self) -> float:
        if self.stderr == 0.0:
            return 0.0 if self.residual == 0.0 else np.inf
        return self.residual / self.stderr


def _paired(lhs_i, rhs_i) -> DualityResult:
    n = lhs_i.size
    diff = lhs_i - rhs_i
    se = float(np.std(diff, ddof=1) / np.sqrt(n)) if n > 1 else np.inf
    return DualityResult(float(lhs_i.mean()), float(rhs_i.mean()), se)


def duality_residual(F: Functional, u, paths: Paths, kind: str = "brownian") -> DualityResult:
    """Monte Carlo check of ``E[F delta(u)] = E[int u D F]``.

    ``u`` is an array of adapted values, shape (n, N) for ``"brownian"`` or
    (n, N, A) for ``"poisson"`` (values on cell ``k`` may only use noise of
    earlier cells). For ``"brownian"`` a list of N functionals is also accepted;
    the discrete Skorohod integral ``sum u_k dB_k - sum D_k u_k dt_k`` is then used.
    """
    dt = paths.grid.dt
    Fv = F.value(paths)
    if kind == "brownian":
        if isinstance(u, (list, tuple)):
            uk = np.stack([lift(x).value(paths) for x in u], axis=1)
            corr = np.stack([lift(x).dt(paths, k) for k, x in enumerate(u)], axis=1)
        else:
            uk = np.asarray(u, dtype=float)
            corr = np.zeros_like(uk)
        delta = np.sum(uk * paths.dB - corr * dt, axis=1)
        rhs = np.sum(uk * F.dt_all(paths) * dt, axis=1)
    elif kind == "poisson":
        uk = np.asarray(u, dtype=float)
        delta = np.sum(uk * paths.dN_tilde, axis=(1, 2))
        rhs = np.sum(uk * F.dz_all(paths) * paths.model.lam * dt[:, None], axis=(1, 2))
    else:
        raise ValueError(f"unknown kind {kind!r}")
    return _paired(Fv * delta, rhs)

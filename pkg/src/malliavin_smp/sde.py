"""Controlled Itô-Lévy state, variational process and stochastic exponential.

Coefficient callables use the signatures ``b(t, x, u, ctx)``, ``sigma(t, x, u, ctx)``,
``theta(t, x, u, z, ctx)``, ``f(t, x, u, ctx)`` and ``g(x, ctx)``. ``ctx`` is a
:class:`StepContext` giving access to the noise observed so far; purely
deterministic coefficients ignore it. All arguments are numpy arrays over paths.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import sympy as sp

from .linear import DomainError, LinearTables, log_multipliers, trajectory
from .malliavin import Functional, Smooth, State
from .noise import Paths, TimeGrid


class SimulationError(RuntimeError):
    """A coefficient or cost evaluated to a non-finite number."""

    def __init__(self, op: str, path_id: int, t: float, what: str):
        super().__init__(f"levy_sde.{op}: non-finite {what} on path {path_id} at t={t:.6g}")
        self.op, self.path_id, self.t = op, path_id, t


class AdmissibilityError(ValueError):
    """A control value left the admissible open interval."""

    def __init__(self, path_id: int, t: float, value: float, bounds):
        super().__init__(f"control value {value:.6g} outside {bounds} on path {path_id} at t={t:.6g}")
        self.path_id, self.t, self.value = path_id, t, value


@dataclass(frozen=True)
class StepContext:
    """Noise observed up to grid index ``k``."""

    paths: Paths
    k: int

    @property
    def t(self) -> float:
        return float(self.paths.grid.t[self.k])

    @property
    def B(self) -> np.ndarray:
        return self.paths.B[:, self.k]

    @property
    def eta(self) -> np.ndarray:
        return self.paths.eta[:, self.k]

    @property
    def counts(self) -> np.ndarray:
        return self.paths.counts[:, :self.k].sum(axis=1)


# --- filtration and controls ----------------------------------------------------

@dataclass(frozen=True)
class FiltrationSpec:
    """``E_t = F_{(t - delay)^+}`` with a polynomial regression basis on observables.

    ``features`` picks from ``"B"``, ``"eta"``, ``"N"`` (total jump count) and ``"X"``.
    """

    delay: float = 0.0
    features: tuple = ("B", "eta", "X")
    degree: int = 2

    def __post_init__(self):
        if not self.delay >= 0.0:
            raise ValueError("delay must be >= 0")
        unknown = set(self.features) - {"B", "eta", "N", "X"}
        if unknown:
            raise ValueError(f"unknown features {sorted(unknown)}")

    def observation_index(self, grid: TimeGrid, k: int) -> int:
        return grid.index_at_or_before(max(float(grid.t[k]) - self.delay, 0.0))

    def observables(self, paths: Paths, k: int, X: np.ndarray | None = None) -> list[np.ndarray]:
        j = self.observation_index(paths.grid, k)
        cols = []
        for name in self.features:
            if name == "B" and paths.model.brownian:
                cols.append(paths.B[:, j])
            elif name == "eta" and paths.model.n_atoms:
                cols.append(paths.eta[:, j])
            elif name == "N" and paths.model.n_atoms:
                cols.append(paths.counts[:, :j].sum(axis=(1, 2)).astype(float))
            elif name == "X" and X is not None:
                cols.append(X[:, j])
        return cols


@dataclass(frozen=True)
class Observation:
    """What a feedback control may read at grid index ``k``: data up to ``k_obs``."""

    paths: Paths
    k: int
    k_obs: int
    X_hist: np.ndarray | None = None

    @property
    def t(self) -> float:
        return float(self.paths.grid.t[self.k])

    @property
    def B(self) -> np.ndarray:
        return self.paths.B[:, self.k_obs]

    @property
    def eta(self) -> np.ndarray:
        return self.paths.eta[:, self.k_obs]

    @property
    def N(self) -> np.ndarray:
        return self.paths.counts[:, :self.k_obs].sum(axis=(1, 2)).astype(float)

    @property
    def X(self) -> np.ndarray:
        if self.X_hist is None:
            raise ValueError("state is not observable here")
        return self.X_hist[:, self.k_obs]


CONTROL_KINDS = ("constant", "table", "feedback", "affine", "array")


@dataclass(frozen=True, eq=False)
class Control:
    """An admissible control. Build with the class constructors.

    ``affine`` means ``u(t) = u0(t) + u1(t) X(t)`` along the controlled state
    itself; once simulated it is a fixed process, and perturbations ``u + y beta``
    act on that process.
    """

    kind: str
    bounds: tuple = (-np.inf, np.inf)
    value: float = 0.0
    table: np.ndarray | None = None
    slope: np.ndarray | None = None
    fn: Callable | None = None
    delay: float = 0.0
    array: np.ndarray | None = None
    path_ids: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in CONTROL_KINDS:
            raise ValueError(f"unknown control kind {self.kind!r}")
        lo, hi = self.bounds
        if not lo < hi:
            raise ValueError("admissible interval must be non-empty")

    @classmethod
    def constant(cls, c: float, bounds=(-np.inf, np.inf)) -> "Control":
        return cls("constant", tuple(bounds), value=float(c))

    @classmethod
    def from_table(cls, values, bounds=(-np.inf, np.inf)) -> "Control":
        return cls("table", tuple(bounds), table=np.asarray(values, dtype=float))

    @classmethod
    def feedback(cls, fn: Callable[[Observation], np.ndarray], delay: float = 0.0,
                 bounds=(-np.inf, np.inf)) -> "Control":
        return cls("feedback", tuple(bounds), fn=fn, delay=float(delay))

    @classmethod
    def affine(cls, u0, u1, bounds=(-np.inf, np.inf)) -> "Control":
        return cls("affine", tuple(bounds), table=u0, slope=u1)

    @classmethod
    def from_array(cls, values: np.ndarray, path_ids: np.ndarray, bounds=(-np.inf, np.inf)) -> "Control":
        return cls("array", tuple(bounds), array=np.asarray(values, dtype=float),
                   path_ids=np.asarray(path_ids))

    @property
    def deterministic(self) -> bool:
        return self.kind in ("constant", "table")

    def _grid_values(self, v, grid: TimeGrid) -> np.ndarray:
        if callable(v):
            return np.broadcast_to(np.asarray(v(grid.t), dtype=float), grid.t.shape).copy()
        v = np.asarray(v, dtype=float)
        if v.ndim == 0:
            return np.full(grid.t.shape, float(v))
        if v.shape != grid.t.shape:
            raise ValueError(f"control table needs {grid.t.size} grid values, got {v.shape}")
        return v

    def intercept(self, grid: TimeGrid) -> np.ndarray:
        if self.kind == "constant":
            return np.full(grid.t.shape, self.value)
        if self.kind in ("table", "affine"):
            return self._grid_values(self.table, grid)
        raise ValueError(f"{self.kind} control has no deterministic table")

    def gain(self, grid: TimeGrid) -> np.ndarray:
        if self.kind == "affine":
            return self._grid_values(self.slope, grid)
        return np.zeros(grid.t.shape)

    def at(self, paths: Paths, k: int, X_hist: np.ndarray | None = None) -> np.ndarray:
        """Control on all paths at grid index ``k``; ``X_hist`` holds the state up to ``k``."""
        n = len(paths)
        if self.kind == "constant":
            return np.full(n, self.value)
        if self.kind == "table":
            return np.full(n, self.intercept(paths.grid)[k])
        if self.kind == "affine":
            if X_hist is None:
                raise ValueError("affine control needs the state")
            return self.intercept(paths.grid)[k] + self.gain(paths.grid)[k] * X_hist[:, k]
        if self.kind == "array":
            if self.path_ids is not None and not np.array_equal(self.path_ids, paths.path_ids):
                raise ValueError("control array was built for different paths")
            return self.array[:, k]
        k_obs = paths.grid.index_at_or_before(max(float(paths.grid.t[k]) - self.delay, 0.0))
        out = self.fn(Observation(paths, k, k_obs, X_hist))
        return np.broadcast_to(np.asarray(out, dtype=float), (n,)).copy()

    def check(self, u: np.ndarray, paths: Paths, k: int):
        lo, hi = self.bounds
        bad = ~((u > lo) & (u < hi))
        if np.any(bad):
            i = int(np.argmax(bad))
            raise AdmissibilityError(int(paths.path_ids[i]), float(paths.grid.t[k]), float(u[i]), self.bounds)


# --- coefficients -----------------------------------------------------------------

def _zero(*args):
    return 0.0


def _as_t_fn(c):
    return c if callable(c) else (lambda t, _c=float(c): np.full(np.shape(t), _c) if np.ndim(t) else _c)


def _as_tz_fn(c):
    return c if callable(c) else (lambda t, z, _c=float(c): _c + 0.0 * np.asarray(t, dtype=float))


@dataclass(frozen=True)
class LinearForm:
    """``b = b0 + b1 x + b2 u`` and the same for sigma and theta.

    Entries are constants or deterministic functions of ``t`` (``(t, z)`` for theta).
    """

    b: tuple = (0.0, 0.0, 0.0)
    sigma: tuple = (0.0, 0.0, 0.0)
    theta: tuple = (0.0, 0.0, 0.0)

    def cells(self, grid: TimeGrid, model):
        """Coefficient tables on cell left points: dict name -> (N,) or (N, A)."""
        t = grid.t[:-1]
        out = {}
        for name, coefs in (("b", self.b), ("sigma", self.sigma)):
            for i, c in enumerate(coefs):
                out[f"{name}{i}"] = np.broadcast_to(np.asarray(_as_t_fn(c)(t), dtype=float), t.shape).copy()
        for i, c in enumerate(self.theta):
            arr = np.zeros((t.size, model.n_atoms))
            for a, z in enumerate(model.sizes):
                arr[:, a] = np.broadcast_to(np.asarray(_as_tz_fn(c)(t, z), dtype=float), t.shape)
            out[f"theta{i}"] = arr
        return out

    def state_tables(self, grid: TimeGrid, model, u0, u1=None) -> LinearTables:
        """Tables of the state under ``u = u0 + u1 X``; ``u0`` may be (N,) or (n, N)."""
        c = self.cells(grid, model)
        u1 = np.zeros(grid.n_cells) if u1 is None else u1
        u0 = np.asarray(u0, dtype=float)
        u0a = u0[..., None]
        return LinearTables(grid, model,
                            growth=c["b1"] + c["b2"] * u1, vol=c["sigma1"] + c["sigma2"] * u1,
                            jump=c["theta1"] + c["theta2"] * u1[:, None],
                            drift_src=c["b0"] + c["b2"] * u0, vol_src=c["sigma0"] + c["sigma2"] * u0,
                            jump_src=c["theta0"] + c["theta2"] * u0a)

    def partial_tables(self, grid: TimeGrid, model) -> LinearTables:
        """Homogeneous tables built from the x-partials (the G flow)."""
        c = self.cells(grid, model)
        return LinearTables.build(grid, model, growth=c["b1"], vol=c["sigma1"], jump=c["theta1"])

    def variation_tables(self, grid: TimeGrid, model, beta: np.ndarray) -> LinearTables:
        """Tables of the variational process for a perturbation ``beta`` on cells, (N,) or (n, N)."""
        c = self.cells(grid, model)
        beta = np.asarray(beta, dtype=float)
        return LinearTables(grid, model, growth=c["b1"], vol=c["sigma1"], jump=c["theta1"],
                            drift_src=c["b2"] * beta, vol_src=c["sigma2"] * beta,
                            jump_src=c["theta2"] * beta[..., None])


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Coefficients, costs and their partial derivatives.

    ``terminal_gradient`` maps the terminal-state functional to the functional
    ``g'(X(T))`` for the Malliavin engine; ``linear`` is set for the affine class.
    """

    b: Callable = _zero
    sigma: Callable = _zero
    theta: Callable = _zero
    f: Callable = _zero
    g: Callable = _zero
    b_x: Callable = _zero
    b_u: Callable = _zero
    sigma_x: Callable = _zero
    sigma_u: Callable = _zero
    theta_x: Callable = _zero
    theta_u: Callable = _zero
    f_x: Callable = _zero
    f_u: Callable = _zero
    g_x: Callable = _zero
    linear: LinearForm | None = None
    terminal_gradient: Callable[[Functional], Functional] | None = None


T_SYM, X_SYM, U_SYM = sp.symbols("t x u", real=True)


def _lambdify_txu(expr):
    fn = sp.lambdify((T_SYM, X_SYM, U_SYM), expr, modules="numpy")

    def call(t, x, u, ctx=None):
        return np.asarray(fn(t, x, u), dtype=float) + 0.0 * np.asarray(x, dtype=float)

    return call


def _lambdify_x(expr):
    fn = sp.lambdify((X_SYM,), expr, modules="numpy")

    def call(x, ctx=None):
        return np.asarray(fn(x), dtype=float) + 0.0 * np.asarray(x, dtype=float)

    return call


def linear_coefficients(b=(0.0, 0.0, 0.0), sigma=(0.0, 0.0, 0.0), theta=(0.0, 0.0, 0.0),
                        running="0", terminal="0") -> CoefficientSet:
    """Affine dynamics with sympy costs ``running(t, x, u)`` and ``terminal(x)``."""
    form = LinearForm(tuple(b), tuple(sigma), tuple(theta))
    b0, b1, b2 = (_as_t_fn(c) for c in form.b)
    s0, s1, s2 = (_as_t_fn(c) for c in form.sigma)
    h0, h1, h2 = (_as_tz_fn(c) for c in form.theta)
    names = {"t": T_SYM, "x": X_SYM, "u": U_SYM}
    f = sp.sympify(running, locals=names)
    g = sp.sympify(terminal, locals=names)
    gx = sp.diff(g, X_SYM)

    def terminal_gradient(XT: Functional) -> Functional:
        return Smooth(gx, [XT], (X_SYM,))

    return CoefficientSet(
        b=lambda t, x, u, ctx=None: b0(t) + b1(t) * x + b2(t) * u,
        sigma=lambda t, x, u, ctx=None: s0(t) + s1(t) * x + s2(t) * u,
        theta=lambda t, x, u, z, ctx=None: h0(t, z) + h1(t, z) * x + h2(t, z) * u,
        f=_lambdify_txu(f), g=_lambdify_x(g),
        b_x=lambda t, x, u, ctx=None: b1(t) + 0.0 * x,
        b_u=lambda t, x, u, ctx=None: b2(t) + 0.0 * x,
        sigma_x=lambda t, x, u, ctx=None: s1(t) + 0.0 * x,
        sigma_u=lambda t, x, u, ctx=None: s2(t) + 0.0 * x,
        theta_x=lambda t, x, u, z, ctx=None: h1(t, z) + 0.0 * x,
        theta_u=lambda t, x, u, z, ctx=None: h2(t, z) + 0.0 * x,
        f_x=_lambdify_txu(sp.diff(f, X_SYM)), f_u=_lambdify_txu(sp.diff(f, U_SYM)),
        g_x=_lambdify_x(gx), linear=form, terminal_gradient=terminal_gradient,
    )


# --- trajectories -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Trajectory:
    """State and control on grid points for a batch of paths."""

    grid: TimeGrid
    X: np.ndarray           # (n, N+1)
    u: np.ndarray           # (n, N+1)
    path_ids: np.ndarray
    scheme: str = "euler"
    x0: float = 0.0
    tables: LinearTables | None = field(default=None, repr=False)

    def __post_init__(self):
        self.X.setflags(write=False)
        self.u.setflags(write=False)

    @property
    def XT(self) -> np.ndarray:
        return self.X[:, -1]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path_id", "t", "X", "u"])
            for i, pid in enumerate(self.path_ids):
                for k, t in enumerate(self.grid.t):
                    w.writerow([int(pid), repr(float(t)), repr(float(self.X[i, k])), repr(float(self.u[i, k]))])


def _check_finite(arr, paths: Paths, k: int, op: str, what: str):
    bad = ~np.isfinite(arr)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise SimulationError(op, int(paths.path_ids[i]), float(paths.grid.t[k]), what)


def _control_values(control: Control, paths: Paths, X: np.ndarray | None = None) -> np.ndarray:
    N = paths.grid.n_cells
    u = np.empty((len(paths), N + 1))
    for k in range(N + 1):
        u[:, k] = control.at(paths, k, X)
        control.check(u[:, k], paths, k)
    return u


def simulate_state(coeffs: CoefficientSet, control: Control, paths: Paths, x0: float,
                   scheme: str = "euler") -> Trajectory:
    """Euler scheme on the grid (``scheme="exact"`` delegates to :func:`closed_form_linear`)."""
    if scheme == "exact":
        return closed_form_linear(coeffs, control, paths, x0)
    if scheme != "euler":
        raise ValueError(f"unknown scheme {scheme!r}")
    grid, model = paths.grid, paths.model
    n, N = len(paths), grid.n_cells
    X = np.empty((n, N + 1))
    u = np.empty((n, N + 1))
    X[:, 0] = x0
    dNt = paths.dN_tilde
    for k in range(N + 1):
        u[:, k] = control.at(paths, k, X)
        control.check(u[:, k], paths, k)
        if k == N:
            break
        t = float(grid.t[k])
        ctx = StepContext(paths, k)
        x, uk = X[:, k], u[:, k]
        step = coeffs.b(t, x, uk, ctx) * grid.dt[k] + coeffs.sigma(t, x, uk, ctx) * paths.dB[:, k]
        for i, z in enumerate(model.sizes):
            step = step + coeffs.theta(t, x, uk, z, ctx) * dNt[:, k, i]
        X[:, k + 1] = x + step
        _check_finite(X[:, k + 1], paths, k + 1, "simulate_state", "state")
    return Trajectory(grid, X, u, paths.path_ids.copy(), "euler", float(x0))


def _require_linear(coeffs: CoefficientSet):
    if coeffs.linear is None:
        raise ValueError("closed forms need a CoefficientSet with the linear flag")


def state_tables(coeffs: CoefficientSet, control: Control, paths: Paths) -> LinearTables:
    """Linear tables of the controlled state (affine controls fold into the state coefficients)."""
    _require_linear(coeffs)
    grid = paths.grid
    if control.kind in ("constant", "table", "affine"):
        return coeffs.linear.state_tables(grid, paths.model, control.intercept(grid)[:-1], control.gain(grid)[:-1])
    u = _control_values(control, paths)
    return coeffs.linear.state_tables(grid, paths.model, u[:, :-1])


def closed_form_linear(coeffs: CoefficientSet, control: Control, paths: Paths, x0: float) -> Trajectory:
    """Stochastic-exponential solution on the discrete noise (exact for homogeneous equations)."""
    tables = state_tables(coeffs, control, paths)
    X = trajectory(tables, paths, "exact", x0)
    _check_finite(X, paths, paths.grid.n_cells, "closed_form_linear", "state")
    if control.kind == "affine":
        u = _control_values(control, paths, X)
    else:
        u = _control_values(control, paths)
    return Trajectory(paths.grid, X.copy(), u, paths.path_ids.copy(), "exact", float(x0), tables)


def state_functional(coeffs: CoefficientSet, control: Control, paths: Paths, x0: float,
                     scheme: str = "exact", j: int | None = None) -> State:
    """``X(t_j)`` as a Malliavin-engine functional (terminal value by default)."""
    tables = state_tables(coeffs, control, paths)
    return State(tables, scheme, paths.grid.n_cells if j is None else j, x0)


def partial_tables(coeffs: CoefficientSet, paths: Paths, state: Trajectory) -> LinearTables:
    """Homogeneous tables from the x-partials evaluated along ``state``."""
    if coeffs.linear is not None:
        return coeffs.linear.partial_tables(paths.grid, paths.model)
    grid, model = paths.grid, paths.model
    n, N = len(paths), grid.n_cells
    bx = np.empty((n, N))
    sx = np.empty((n, N))
    tx = np.empty((n, N, model.n_atoms))
    for k in range(N):
        t, ctx = float(grid.t[k]), StepContext(paths, k)
        x, u = state.X[:, k], state.u[:, k]
        bx[:, k] = coeffs.b_x(t, x, u, ctx)
        sx[:, k] = coeffs.sigma_x(t, x, u, ctx)
        for i, z in enumerate(model.sizes):
            tx[:, k, i] = coeffs.theta_x(t, x, u, z, ctx)
    return LinearTables(grid, model, bx, sx, tx, np.zeros(N), np.zeros(N), np.zeros((N, model.n_atoms)))


def _partials_along(coeffs: CoefficientSet, paths: Paths, state: Trajectory, which: str) -> dict:
    """Partials (x or u) of b, sigma, theta on every cell, arrays of shape (n, N[, A])."""
    grid, model = paths.grid, paths.model
    n, N = len(paths), grid.n_cells
    fb, fs, ft = (coeffs.b_x, coeffs.sigma_x, coeffs.theta_x) if which == "x" else \
        (coeffs.b_u, coeffs.sigma_u, coeffs.theta_u)
    out = {"b": np.empty((n, N)), "sigma": np.empty((n, N)), "theta": np.empty((n, N, model.n_atoms))}
    for k in range(N):
        t, ctx = float(grid.t[k]), StepContext(paths, k)
        x, u = state.X[:, k], state.u[:, k]
        out["b"][:, k] = fb(t, x, u, ctx)
        out["sigma"][:, k] = fs(t, x, u, ctx)
        for i, z in enumerate(model.sizes):
            out["theta"][:, k, i] = ft(t, x, u, z, ctx)
    return out


def perturbation_values(beta: Control, paths: Paths) -> np.ndarray:
    return _control_values(Control(beta.kind, (-np.inf, np.inf), beta.value, beta.table, beta.slope,
                                   beta.fn, beta.delay, beta.array, beta.path_ids), paths)


def variational_process(coeffs: CoefficientSet, control: Control, beta: Control, paths: Paths,
                        state: Trajectory, scheme: str | None = None) -> Trajectory:
    """``dY = (b_x Y + b_u beta) dt + (sigma_x Y + sigma_u beta) dB + sum (theta_x Y + theta_u beta) dÑ``.

    The scheme defaults to the one that produced ``state`` so that ``Y`` is the
    exact derivative of the discrete state in the perturbation size.
    """
    scheme = state.scheme if scheme is None else scheme
    bv = perturbation_values(beta, paths)
    if scheme == "exact":
        _require_linear(coeffs)
        tables = coeffs.linear.variation_tables(paths.grid, paths.model, bv[:, :-1])
        Y = trajectory(tables, paths, "exact", 0.0)
        return Trajectory(paths.grid, Y.copy(), bv, paths.path_ids.copy(), "exact", 0.0, tables)
    px = _partials_along(coeffs, paths, state, "x")
    pu = _partials_along(coeffs, paths, state, "u")
    grid = paths.grid
    n, N = len(paths), grid.n_cells
    Y = np.zeros((n, N + 1))
    dNt = paths.dN_tilde
    for k in range(N):
        y, b = Y[:, k], bv[:, k]
        step = (px["b"][:, k] * y + pu["b"][:, k] * b) * grid.dt[k]
        step = step + (px["sigma"][:, k] * y + pu["sigma"][:, k] * b) * paths.dB[:, k]
        step = step + np.sum((px["theta"][:, k] * y[:, None] + pu["theta"][:, k] * b[:, None]) * dNt[:, k], axis=1)
        Y[:, k + 1] = y + step
        _check_finite(Y[:, k + 1], paths, k + 1, "variational_process", "variation")
    return Trajectory(grid, Y, bv, paths.path_ids.copy(), "euler", 0.0)


@dataclass(frozen=True, eq=False)
class GFlow:
    """``G(t_j, t_k) = exp(L_k - L_j)`` from cumulative log-increments ``L`` (n, N+1)."""

    L: np.ndarray

    def __call__(self, j: int, k: int) -> np.ndarray:
        if k < j:
            raise ValueError("G(t, s) needs t <= s")
        return np.exp(self.L[:, k] - self.L[:, j])

    def from_(self, j: int) -> Callable[[int], np.ndarray]:
        return lambda k: self(j, k)


def stochastic_exponential_G(coeffs: CoefficientSet, control: Control, paths: Paths,
                             state: Trajectory, t: int | None = None):
    """The flow ``G(t, s)`` of the homogeneous variational equation.

    Returns a :class:`GFlow` when ``t`` is None, otherwise the map ``s -> G(t, s)``
    over grid indices.
    """
    tables = partial_tables(coeffs, paths, state)
    try:
        logg = log_multipliers(tables, paths)
    except DomainError as exc:
        raise DomainError(f"levy_sde.stochastic_exponential_G: {exc}") from None
    L = np.zeros((len(paths), paths.grid.n_cells + 1))
    np.cumsum(logg, axis=1, out=L[:, 1:])
    flow = GFlow(L)
    return flow if t is None else flow.from_(t)


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float
    samples: np.ndarray | None = field(default=None, repr=False, compare=False)


def estimate(samples: np.ndarray) -> Estimate:
    samples = np.asarray(samples, dtype=float)
    se = float(np.std(samples, ddof=1) / np.sqrt(samples.size)) if samples.size > 1 else np.inf
    return Estimate(float(samples.mean()), se, samples)


def pathwise_performance(coeffs: CoefficientSet, state: Trajectory, paths: Paths) -> np.ndarray:
    """``int_0^T f dt`` (trapezoid) ``+ g(X(T))`` on each path."""
    grid = paths.grid
    w = grid.trapezoid_weights()
    total = np.zeros(len(paths))
    for k in range(grid.n_cells + 1):
        fk = np.asarray(coeffs.f(float(grid.t[k]), state.X[:, k], state.u[:, k], StepContext(paths, k)), dtype=float)
        total = total + w[k] * fk
    total = total + np.asarray(coeffs.g(state.X[:, -1], StepContext(paths, grid.n_cells)), dtype=float)
    _check_finite(total, paths, grid.n_cells, "performance", "cost")
    return total


def performance(coeffs: CoefficientSet, control: Control, paths: Paths, x0: float,
                scheme: str = "euler") -> Estimate:
    """Monte Carlo estimate of ``J(u)`` with its standard error."""
    state = simulate_state(coeffs, control, paths, x0, scheme)
    return estimate(pathwise_performance(coeffs, state, paths))

"""Numerical checks of the partial-information maximum principle.

Direction (i): at a critical point of ``J`` the conditional Hamiltonian gradient
``E[dH/du | E_t]`` vanishes. Direction (ii): where it vanishes, directional
derivatives of ``J`` vanish. Both are tested against Monte Carlo error bands.
A passing report certifies criticality only, never optimality.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adjoint import AdjointSample, KParts, compute_K, hamiltonian_u_partial
from .noise import Paths
from .regression import polynomial_features, zero_test
from .sde import (CoefficientSet, Control, Estimate, FiltrationSpec, Observation, StepContext,
                  Trajectory, estimate, pathwise_performance, perturbation_values, simulate_state,
                  variational_process)

BAND = 3.0


@dataclass(frozen=True)
class DirectionalDerivative:
    """``fd`` is the Richardson combination ``(4 d(y/2) - d(y)) / 3`` of two central
    differences, which removes their ``O(y^2)`` truncation error."""

    fd: Estimate
    analytic: Estimate
    fd_half: Estimate
    y_step: float
    halving_gap: float
    halving_stderr: float
    roundoff: float = 0.0      # floating-point floor of the difference quotient

    @property
    def halving_consistent(self) -> bool:
        scale = max(1.0, abs(self.fd.value))
        return self.halving_gap <= BAND * self.halving_stderr + 1e-4 * scale

    @property
    def vanishes(self) -> bool:
        """``|dJ/dy| < 3`` standard errors (an exact zero counts as vanishing)."""
        return _within_band(self.fd.value, self.fd.stderr, floor=self.roundoff)


def _within_band(value: float, stderr: float, band: float = BAND, floor: float = 0.0) -> bool:
    if stderr == 0.0 or not np.isfinite(stderr):
        return abs(value) <= max(1e-9, floor)
    return abs(value) < band * stderr + floor


def _paired_stderr(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a) - np.asarray(b)
    return float(np.std(d, ddof=1) / np.sqrt(d.size)) if d.size > 1 else np.inf


def _nominal(coeffs, control, paths, x0, scheme, state):
    return simulate_state(coeffs, control, paths, x0, scheme) if state is None else state


def _pathwise_J(coeffs, control_values, bounds, paths, x0, scheme) -> np.ndarray:
    ctl = Control.from_array(control_values, paths.path_ids, bounds)
    st = simulate_state(coeffs, ctl, paths, x0, scheme)
    if not np.array_equal(st.path_ids, paths.path_ids):
        raise AssertionError("common random numbers violated")
    return pathwise_performance(coeffs, st, paths)


def default_step(beta_values: np.ndarray) -> float:
    scale = float(np.max(np.abs(beta_values), initial=0.0))
    return 1e-3 / scale if scale > 0 else 1e-3


def directional_derivative(coeffs: CoefficientSet, control: Control, beta: Control, paths: Paths,
                           x0: float, y_step: float | None = None, scheme: str = "euler",
                           state: Trajectory | None = None) -> DirectionalDerivative:
    """Central difference of ``J(u + y beta)`` with common random numbers, and the
    variational form ``E[int (f_x Y + f_u beta) dt + g'(X(T)) Y(T)]``."""
    state = _nominal(coeffs, control, paths, x0, scheme, state)
    bv = perturbation_values(beta, paths)
    y = default_step(bv) if y_step is None else float(y_step)
    n = len(paths)
    if not np.any(bv):
        zero = estimate(np.zeros(n))
        return DirectionalDerivative(zero, zero, zero, y, 0.0, 0.0)

    scale = [1.0]

    def central(h):
        jp = _pathwise_J(coeffs, state.u + h * bv, control.bounds, paths, x0, state.scheme)
        jm = _pathwise_J(coeffs, state.u - h * bv, control.bounds, paths, x0, state.scheme)
        scale[0] = max(scale[0], float(np.mean(np.abs(jp))))
        return (jp - jm) / (2 * h)

    d1 = central(y)
    d2 = central(y / 2)
    Y = variational_process(coeffs, control, beta, paths, state)
    grid = paths.grid
    w = grid.trapezoid_weights()
    analytic = np.zeros(n)
    for k in range(grid.n_cells + 1):
        t, ctx = float(grid.t[k]), StepContext(paths, k)
        x, u = state.X[:, k], state.u[:, k]
        analytic += w[k] * (coeffs.f_x(t, x, u, ctx) * Y.X[:, k] + coeffs.f_u(t, x, u, ctx) * bv[:, k])
    analytic += coeffs.g_x(state.X[:, -1], StepContext(paths, grid.n_cells)) * Y.X[:, -1]
    return DirectionalDerivative(estimate((4 * d2 - d1) / 3), estimate(analytic), estimate(d2), y,
                                 abs(float(d1.mean() - d2.mean())), _paired_stderr(d1, d2),
                                 1e3 * np.finfo(float).eps * scale[0] / y)


def perturbation_bump(t: float, h: float, alpha=None, delay: float = 0.0, bounds=(-np.inf, np.inf)) -> Control:
    """``beta(s) = alpha * 1[t <= s < t + h]`` with ``alpha`` read at ``(t - delay)^+``.

    ``alpha`` maps an :class:`Observation` to per-path values; None means 1.
    """
    if h <= 0:
        raise ValueError("bump width must be positive")

    def fn(obs: Observation):
        grid = obs.paths.grid
        s = float(grid.t[obs.k])
        eps = 1e-12 * grid.T
        inside = (s >= t - eps) and (s < t + h - eps)
        if not inside:
            return np.zeros(len(obs.paths))
        k_t = grid.index_at_or_before(t)
        k_obs = grid.index_at_or_before(max(t - delay, 0.0))
        a = 1.0 if alpha is None else alpha(Observation(obs.paths, k_t, k_obs, obs.X_hist))
        return np.broadcast_to(np.asarray(a, dtype=float), (len(obs.paths),))

    return Control.feedback(fn, delay=0.0, bounds=bounds)


@dataclass(frozen=True)
class BucketStat:
    t: float
    cell: int
    estimate: float
    stderr: float
    rms_fitted: float
    z: float

    @property
    def passes(self) -> bool:
        return self.z < BAND


@dataclass
class CriticalityReport:
    """Per-bucket conditional gradients, directional derivatives and identity residuals."""

    buckets: list = field(default_factory=list)
    directional: dict = field(default_factory=dict)
    identity: dict = field(default_factory=dict)
    fitted: dict = field(default_factory=dict, repr=False)
    note: str = "criticality check only; a passing report does not certify a maximum"

    @property
    def fraction_passing(self) -> float:
        if not self.buckets:
            return 1.0
        return float(np.mean([b.passes for b in self.buckets]))

    def critical(self, fraction: float = 0.95) -> bool:
        return self.fraction_passing >= fraction

    def to_dict(self) -> dict:
        def clean(x):
            return None if isinstance(x, float) and not np.isfinite(x) else x

        return {
            "note": self.note,
            "fraction_passing": self.fraction_passing,
            "buckets": [{k: clean(v) for k, v in asdict(b).items()} | {"passes": b.passes} for b in self.buckets],
            "directional": {k: {kk: clean(vv) for kk, vv in v.items()} for k, v in self.directional.items()},
            "identity": {k: {kk: clean(vv) for kk, vv in v.items()} for k, v in self.identity.items()},
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "estimate", "stderr", "z", "verdict"])
            for b in self.buckets:
                w.writerow([repr(b.t), repr(b.estimate), repr(b.stderr), repr(b.z),
                            "pass" if b.passes else "fail"])


def hamiltonian_gradient_paths(adj: AdjointSample, coeffs: CoefficientSet, paths: Paths,
                               state: Trajectory, k: int) -> np.ndarray:
    """Pathwise ``dH/du`` at grid index ``k``."""
    return hamiltonian_u_partial(coeffs, paths.model, adj.p[:, k], adj.q[:, k], adj.r[:, k],
                                 float(paths.grid.t[k]), state.X[:, k], state.u[:, k], StepContext(paths, k))


def conditional_hamiltonian_gradient(adj: AdjointSample, coeffs: CoefficientSet, control: Control,
                                     filtration: FiltrationSpec, paths: Paths, state: Trajectory,
                                     buckets=None, report: CriticalityReport | None = None) -> CriticalityReport:
    """Regress pathwise ``dH/du`` on ``E_t`` features in each bucket and test for zero."""
    report = CriticalityReport() if report is None else report
    if buckets is None:
        buckets = [k for k in range(paths.grid.n_cells) if not np.isnan(adj.q[0, k])]
    for k in buckets:
        h = hamiltonian_gradient_paths(adj, coeffs, paths, state, k)
        X = polynomial_features(filtration.observables(paths, k, state.X), filtration.degree, n=len(paths))
        zt = zero_test(h, X)
        report.buckets.append(BucketStat(float(paths.grid.t[k]), int(k), zt.estimate, zt.stderr, zt.rms_fitted, zt.z))
    return report


@dataclass(frozen=True)
class IdentityResult:
    lhs: Estimate
    fd: Estimate
    stderr: float

    @property
    def residual(self) -> float:
        gap = abs(self.lhs.value - self.fd.value)
        if self.stderr == 0.0:
            return 0.0 if gap <= 1e-9 * max(1.0, abs(self.fd.value)) else np.inf
        return gap / self.stderr


def adjoint_identity_residual(coeffs: CoefficientSet, control: Control, beta: Control, paths: Paths, x0: float,
                           y_step: float | None = None, state: Trajectory | None = None,
                           kparts: KParts | None = None) -> IdentityResult:
    """Compare the adjoint-weighted perturbation integral with the finite-difference ``dJ/dy``.

    The running part of ``K`` uses the same trapezoid weights as the performance
    functional, strictly after the perturbed cell, so that with the Euler state
    the two sides agree in expectation up to Monte Carlo error.
    """
    state = _nominal(coeffs, control, paths, x0, "euler", state)
    kp = compute_K(coeffs, control, paths, state) if kparts is None else kparts
    grid, model = paths.grid, paths.model
    N = grid.n_cells
    bv = perturbation_values(beta, paths)
    Y = variational_process(coeffs, control, beta, paths, state)
    w = grid.trapezoid_weights()
    gprime = kp.K[:, -1]
    after = np.concatenate([np.cumsum((w * kp.fx)[::-1])[::-1][1:], [0.0]])   # sum_{j > k} w_j f_x(j)
    lhs = np.zeros(len(paths))
    for k in range(N):
        t, ctx = float(grid.t[k]), StepContext(paths, k)
        x, u, yk, b = state.X[:, k], state.u[:, k], Y.X[:, k], bv[:, k]
        Kk = gprime + after[k]
        term = Kk * (coeffs.b_x(t, x, u, ctx) * yk + coeffs.b_u(t, x, u, ctx) * b)
        term = term + kp.DtK[:, k] * (coeffs.sigma_x(t, x, u, ctx) * yk + coeffs.sigma_u(t, x, u, ctx) * b)
        for i, z in enumerate(model.sizes):
            term = term + kp.DzK[:, k, i] * model.lam[i] * (
                coeffs.theta_x(t, x, u, z, ctx) * yk + coeffs.theta_u(t, x, u, z, ctx) * b)
        lhs += grid.dt[k] * term
    for k in range(N + 1):
        t, ctx = float(grid.t[k]), StepContext(paths, k)
        lhs += w[k] * coeffs.f_u(t, state.X[:, k], state.u[:, k], ctx) * bv[:, k]
    dd = directional_derivative(coeffs, control, beta, paths, x0, y_step, state.scheme, state)
    fd = dd.fd.samples
    return IdentityResult(estimate(lhs), dd.fd, _paired_stderr(lhs, fd))


def bucket_cells(grid, n_buckets: int) -> np.ndarray:
    """``n_buckets`` evenly spread cell indices in ``0..N-1`` (deduplicated)."""
    if n_buckets < 1:
        raise ValueError("need at least one bucket")
    return np.unique(np.round(np.linspace(0, grid.n_cells - 1, n_buckets)).astype(int))

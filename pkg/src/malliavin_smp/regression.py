"""Least-squares conditional expectations on polynomial features."""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats


class RankWarning(UserWarning):
    """The feature matrix was rank deficient; the basis was reduced."""


def polynomial_features(columns: list[np.ndarray], degree: int = 2, n: int | None = None) -> np.ndarray:
    """Monomials up to ``degree`` in the standardized columns, intercept first."""
    if n is None:
        n = len(columns[0]) if columns else 0
    feats = [np.ones(n)]
    std = []
    for c in columns:
        c = np.asarray(c, dtype=float)
        s = c.std()
        if s > 0:
            std.append((c - c.mean()) / s)
    for d in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(len(std)), d):
            feats.append(np.prod([std[i] for i in combo], axis=0))
    return np.column_stack(feats)


def _independent_columns(X: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Indices of a maximal well-conditioned subset of columns (greedy, keeps the intercept)."""
    keep = []
    for j in range(X.shape[1]):
        trial = keep + [j]
        s = np.linalg.svd(X[:, trial], compute_uv=False)
        if s[-1] > rtol * s[0]:
            keep.append(j)
    return np.array(keep, dtype=int)


@dataclass(frozen=True)
class Fit:
    coef: np.ndarray
    columns: np.ndarray
    fitted: np.ndarray
    reduced: bool

    def predict(self, X: np.ndarray) -> np.ndarray:
        return X[:, self.columns] @ self.coef


def fit(y: np.ndarray, X: np.ndarray) -> Fit:
    """Least squares of ``y`` on ``X``; drops dependent columns with a :class:`RankWarning`."""
    y = np.asarray(y, dtype=float)
    cols = _independent_columns(X)
    reduced = cols.size < X.shape[1]
    if reduced:
        warnings.warn(f"feature matrix rank deficient; kept {cols.size} of {X.shape[1]} columns",
                      RankWarning, stacklevel=2)
    Xr = X[:, cols]
    coef, *_ = np.linalg.lstsq(Xr, y, rcond=None)
    return Fit(coef, cols, Xr @ coef, reduced)


def conditional_expectation(y: np.ndarray, columns: list[np.ndarray], degree: int = 2) -> np.ndarray:
    """Regression estimate of ``E[y | columns]`` on each path."""
    y = np.asarray(y, dtype=float)
    return fit(y, polynomial_features(columns, degree, n=y.size)).fitted


class NormalEquations:
    """Streaming accumulator of ``X'X`` and ``X'y`` for several targets.

    Feature scaling must be fixed across blocks, so features are passed raw and
    the caller is responsible for reasonable magnitudes.
    """

    def __init__(self, n_features: int, n_targets: int = 1):
        self.XtX = np.zeros((n_features, n_features))
        self.Xty = np.zeros((n_features, n_targets))
        self.n = 0

    def add(self, X: np.ndarray, Y: np.ndarray):
        Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
        self.XtX += X.T @ X
        self.Xty += X.T @ Y
        self.n += X.shape[0]

    def solve(self) -> np.ndarray:
        """Coefficients, shape (n_features, n_targets); pseudo-inverse on rank deficiency."""
        s = np.linalg.svd(self.XtX, compute_uv=False)
        if s[-1] <= 1e-12 * s[0]:
            warnings.warn("normal equations rank deficient; using pseudo-inverse", RankWarning, stacklevel=2)
            return np.linalg.pinv(self.XtX, rcond=1e-12) @ self.Xty
        return np.linalg.solve(self.XtX, self.Xty)


def raw_monomials(columns: list[np.ndarray], degree: int = 2) -> np.ndarray:
    """Unstandardized monomials up to ``degree``, intercept first (for streaming fits)."""
    n = len(columns[0])
    feats = [np.ones(n)]
    for d in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(len(columns)), d):
            feats.append(np.prod([columns[i] for i in combo], axis=0))
    return np.column_stack(feats)


@dataclass(frozen=True)
class ZeroTest:
    """Wald test of ``E[h | features] = 0`` from a regression of ``h`` on the features."""

    estimate: float        # mean of the fitted conditional expectation
    stderr: float          # standard error of the plain mean of h
    rms_fitted: float
    chi2: float
    dof: int
    z: float               # two-sided normal equivalent of the Wald p-value

    @property
    def passes(self) -> bool:
        return self.z < 3.0


def _z_from_chi2(chi2: float, dof: int) -> float:
    if not np.isfinite(chi2):
        return np.inf
    p = stats.chi2.sf(chi2, dof)
    if p <= 0.0:
        # beyond double precision; use the Wilson-Hilferty normal approximation
        return float((np.cbrt(chi2 / dof) - (1 - 2 / (9 * dof))) / np.sqrt(2 / (9 * dof)))
    return float(stats.norm.isf(p / 2))


def zero_test(h: np.ndarray, X: np.ndarray, tol: float = 1e-12) -> ZeroTest:
    """Test ``E[h | X] = 0`` with an HC0 robust Wald statistic."""
    h = np.asarray(h, dtype=float)
    n = h.size
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankWarning)
        f = fit(h, X)
    Xr = X[:, f.columns]
    resid = h - f.fitted
    scale = max(1.0, float(np.max(np.abs(h), initial=0.0)))
    stderr = float(np.std(h, ddof=1) / np.sqrt(n)) if n > 1 else np.inf
    est = float(f.fitted.mean())
    rms = float(np.sqrt(np.mean(f.fitted**2)))
    dof = int(f.columns.size)
    if np.max(np.abs(resid), initial=0.0) <= tol * scale:
        # h is an exact function of the features: no sampling noise left
        z = 0.0 if np.max(np.abs(f.coef), initial=0.0) <= tol * scale else np.inf
        return ZeroTest(est, stderr, rms, 0.0 if z == 0.0 else np.inf, dof, z)
    bread = np.linalg.pinv(Xr.T @ Xr)
    meat = (Xr * resid[:, None] ** 2).T @ Xr
    V = bread @ meat @ bread
    chi2 = float(f.coef @ np.linalg.pinv(V) @ f.coef)
    return ZeroTest(est, stderr, rms, chi2, dof, _z_from_chi2(chi2, dof))

"""Truncated Wiener-Itô chaos expansions with piecewise-constant kernels.

Kernels are arrays over *slots*: grid cells for the Brownian integrator, and
(cell, atom) pairs flattened as ``cell * A + atom`` for the compensated Poisson
integrator. A slot carries weight ``dt`` (Brownian) or ``dt * intensity``
(Poisson), and the noise increment ``dB`` or ``dÑ``.

Iterated integrals are evaluated exactly for piecewise-constant kernels. The
integral is a sum over set partitions of the ``n`` arguments: arguments in one
block share a slot, and a block of size ``m`` contributes the weight ``W_m``.
``W_m`` is obtained by Möbius inversion from the one-slot integrals
``I_m(1_A^{⊗m})``, which are Hermite polynomials (Brownian) or Charlier
polynomials (Poisson) of the slot increment. For Brownian noise this gives
``W_1 = dB``, ``W_2 = -dt`` and ``W_m = 0`` beyond, so ``I_2(1) = B(T)^2 - T``
exactly. With this choice the isometry, product formula and duality are exact
identities on the discrete noise, not only in the limit.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import sympy as sp
from sympy.utilities.iterables import multiset_partitions

from .malliavin import DualityResult, _paired
from .noise import LevyModel, Paths, TimeGrid

BROWNIAN = "brownian"
POISSON = "poisson"
INTEGRATORS = (BROWNIAN, POISSON)
CHAOS_FORMAT_VERSION = 1
SYMMETRY_TOL = 1e-12


class ChaosOrderError(ValueError):
    """An operation would exceed the chaos order bound ``n_max``."""


def _check_integrator(integrator: str):
    if integrator not in INTEGRATORS:
        raise ValueError(f"integrator must be one of {INTEGRATORS}, got {integrator!r}")


def n_slots(grid: TimeGrid, model: LevyModel, integrator: str) -> int:
    _check_integrator(integrator)
    return grid.n_cells if integrator == BROWNIAN else grid.n_cells * model.n_atoms


def slot_weights(grid: TimeGrid, model: LevyModel, integrator: str) -> np.ndarray:
    _check_integrator(integrator)
    if integrator == BROWNIAN:
        return grid.dt.copy()
    return (grid.dt[:, None] * model.lam[None, :]).ravel()


def slot_of(grid: TimeGrid, model: LevyModel, integrator: str, cell: int, atom: int = 0) -> int:
    if not 0 <= cell < grid.n_cells:
        raise IndexError(f"cell {cell} outside grid")
    if integrator == BROWNIAN:
        return cell
    if not 0 <= atom < model.n_atoms:
        raise IndexError(f"atom {atom} outside model")
    return cell * model.n_atoms + atom


def slot_midpoints(grid: TimeGrid, model: LevyModel, integrator: str) -> tuple[np.ndarray, np.ndarray]:
    """Representative (time, jump size) of each slot; jump sizes are NaN for Brownian slots."""
    mid = 0.5 * (grid.t[:-1] + grid.t[1:])
    if integrator == BROWNIAN:
        return mid, np.full(mid.shape, np.nan)
    return np.repeat(mid, model.n_atoms), np.tile(model.z, grid.n_cells)


# --- diagonal weights ----------------------------------------------------------

@lru_cache(maxsize=None)
def _set_partitions(n: int) -> tuple:
    if n == 0:
        return ((),)
    return tuple(tuple(tuple(b) for b in p) for p in multiset_partitions(list(range(n))))


@lru_cache(maxsize=None)
def _poisson_weight_poly(m: int):
    """``W_m(count, mass)`` for one Poisson slot, as a compiled polynomial."""
    N, c = sp.symbols("N c")

    def J(k):
        return sum(sp.binomial(k, j) * sp.ff(N, j) * (-c) ** (k - j) for j in range(k + 1))

    W = 0
    for part in _set_partitions(m):
        q = len(part)
        W += (-1) ** (q - 1) * sp.factorial(q - 1) * sp.Mul(*[J(len(b)) for b in part])
    W = sp.expand(W)
    return W, sp.lambdify((N, c), W, modules="numpy")


def diagonal_weight(paths: Paths, integrator: str, m: int) -> np.ndarray:
    """``W_m`` on every slot, shape (n, S)."""
    n = len(paths)
    if integrator == BROWNIAN:
        if m == 1:
            return paths.dB
        if m == 2:
            return np.broadcast_to(-paths.grid.dt, (n, paths.grid.n_cells))
        return np.zeros((n, paths.grid.n_cells))
    counts = paths.counts.reshape(n, -1).astype(float)
    mass = slot_weights(paths.grid, paths.model, POISSON)
    if m == 1:
        return counts - mass
    _, fn = _poisson_weight_poly(m)
    return np.broadcast_to(np.asarray(fn(counts, mass), dtype=float), counts.shape)


# --- kernels -------------------------------------------------------------------

def symmetrize(kernel: np.ndarray, n_sym: int | None = None) -> np.ndarray:
    """Average over permutations of the first ``n_sym`` axes (all axes by default)."""
    kernel = np.asarray(kernel, dtype=float)
    n = kernel.ndim if n_sym is None else n_sym
    if n <= 1:
        return kernel.copy()
    rest = tuple(range(n, kernel.ndim))
    acc = np.zeros_like(kernel)
    for perm in itertools.permutations(range(n)):
        acc += np.transpose(kernel, perm + rest)
    return acc / math.factorial(n)


def is_symmetric(kernel: np.ndarray, n_sym: int | None = None, tol: float = SYMMETRY_TOL) -> bool:
    kernel = np.asarray(kernel, dtype=float)
    n = kernel.ndim if n_sym is None else n_sym
    scale = max(1.0, float(np.max(np.abs(kernel)))) if kernel.size else 1.0
    rest = tuple(range(n, kernel.ndim))
    for i in range(n - 1):
        perm = list(range(n))
        perm[i], perm[i + 1] = perm[i + 1], perm[i]
        if np.max(np.abs(kernel - np.transpose(kernel, tuple(perm) + rest)), initial=0.0) > tol * scale:
            return False
    return True


def kernel_from_function(fn, n: int, grid: TimeGrid, model: LevyModel, integrator: str) -> np.ndarray:
    """Piecewise-constant kernel from ``fn(t_1, ..., t_n)`` (Brownian) or
    ``fn(t_1, z_1, ..., t_n, z_n)`` (Poisson), evaluated at slot midpoints and symmetrized."""
    t, z = slot_midpoints(grid, model, integrator)
    S = t.size
    if n == 0:
        return np.asarray(float(fn()))
    grids = np.meshgrid(*([np.arange(S)] * n), indexing="ij")
    args = []
    for g in grids:
        args.append(t[g])
        if integrator == POISSON:
            args.append(z[g])
    out = np.broadcast_to(np.asarray(fn(*args), dtype=float), (S,) * n)
    return symmetrize(out)


_LETTERS = "abcdefghijklmnopqrstuvwxy"


def _integrate(kernel: np.ndarray, n: int, paths: Paths, integrator: str, chunk_elems: int = 4_000_000) -> np.ndarray:
    """``I_n`` applied to the first ``n`` axes of ``kernel``; trailing axes are kept.

    Returns shape (n_paths, *kernel.shape[n:]).
    """
    extra = kernel.shape[n:]
    n_paths = len(paths)
    if n == 0:
        return np.broadcast_to(kernel, (n_paths,) + extra).copy()
    extra_letters = "".join(_LETTERS[-1 - i] for i in range(len(extra)))
    W = {m: diagonal_weight(paths, integrator, m) for m in range(1, n + 1)}
    S = kernel.shape[0]
    rows = max(1, chunk_elems // max(1, S ** max(n - 1, 1) * max(1, int(np.prod(extra)))))
    out = np.zeros((n_paths,) + extra)
    for part in _set_partitions(n):
        sizes = [len(b) for b in part]
        if integrator == BROWNIAN and max(sizes) > 2:
            continue
        sub = [""] * n
        for bi, block in enumerate(part):
            for pos in block:
                sub[pos] = _LETTERS[bi]
        spec = "".join(sub) + extra_letters + "," + ",".join("Z" + _LETTERS[bi] for bi in range(len(part)))
        spec += "->Z" + extra_letters
        for lo in range(0, n_paths, rows):
            hi = min(n_paths, lo + rows)
            ops = [kernel] + [W[s][lo:hi] for s in sizes]
            out[lo:hi] += np.einsum(spec, *ops, optimize=True)
    return out


def iterated_integral(kernel: np.ndarray, paths: Paths, integrator: str = BROWNIAN) -> np.ndarray:
    """``I_n(kernel)`` on each path; rejects asymmetric kernels."""
    _check_integrator(integrator)
    kernel = np.asarray(kernel, dtype=float)
    S = n_slots(paths.grid, paths.model, integrator)
    if any(d != S for d in kernel.shape):
        raise ValueError(f"kernel axes must all have length {S}")
    if not is_symmetric(kernel):
        raise ValueError("kernel is not symmetric")
    return _integrate(kernel, kernel.ndim, paths, integrator)


# --- chaos vectors -------------------------------------------------------------

def _norm2(kernel: np.ndarray, w: np.ndarray) -> float:
    k2 = np.asarray(kernel, dtype=float) ** 2
    for _ in range(k2.ndim):
        k2 = k2 @ w if k2.ndim > 1 else np.dot(k2, w)
    return float(k2)


@dataclass(frozen=True, eq=False)
class ChaosVector:
    """``F = sum_n I_n(f_n)`` with ``kernels[n]`` an n-dimensional symmetric array."""

    integrator: str
    grid: TimeGrid
    model: LevyModel
    kernels: tuple
    n_max: int = 4

    def __post_init__(self):
        _check_integrator(self.integrator)
        S = n_slots(self.grid, self.model, self.integrator)
        ks = []
        for n, k in enumerate(self.kernels):
            k = np.array(k, dtype=float)
            if k.ndim != n or any(d != S for d in k.shape):
                raise ValueError(f"kernel of order {n} must have shape {(S,) * n}, got {k.shape}")
            if not is_symmetric(k):
                raise ValueError(f"kernel of order {n} is not symmetric")
            k.setflags(write=False)
            ks.append(k)
        if not ks:
            ks = [np.array(0.0)]
        if len(ks) - 1 > self.n_max:
            raise ChaosOrderError(f"order {len(ks) - 1} exceeds n_max={self.n_max}")
        object.__setattr__(self, "kernels", tuple(ks))

    @classmethod
    def from_kernels(cls, integrator, grid, model, kernels: dict, n_max: int = 4) -> "ChaosVector":
        S = n_slots(grid, model, integrator)
        top = max(kernels) if kernels else 0
        ks = [np.asarray(kernels.get(n, np.zeros((S,) * n)), dtype=float) for n in range(top + 1)]
        return cls(integrator, grid, model, tuple(ks), max(n_max, top))

    @classmethod
    def constant(cls, c, integrator, grid, model, n_max: int = 4) -> "ChaosVector":
        return cls(integrator, grid, model, (np.array(float(c)),), n_max)

    @property
    def n_slots(self) -> int:
        return n_slots(self.grid, self.model, self.integrator)

    @property
    def weights(self) -> np.ndarray:
        return slot_weights(self.grid, self.model, self.integrator)

    @property
    def order(self) -> int:
        """Highest order with a nonzero kernel."""
        for n in range(len(self.kernels) - 1, -1, -1):
            if np.any(self.kernels[n]):
                return n
        return 0

    def kernel(self, n: int) -> np.ndarray:
        if n < len(self.kernels):
            return self.kernels[n]
        return np.zeros((self.n_slots,) * n)

    def _like(self, kernels, n_max=None) -> "ChaosVector":
        return ChaosVector(self.integrator, self.grid, self.model, tuple(kernels),
                           self.n_max if n_max is None else n_max)

    def _check_compatible(self, other: "ChaosVector"):
        if (other.integrator != self.integrator or other.grid != self.grid
                or other.model != self.model):
            raise ValueError("chaos vectors live on different noises")

    def __add__(self, other):
        if not isinstance(other, ChaosVector):
            return self + ChaosVector.constant(other, self.integrator, self.grid, self.model, self.n_max)
        self._check_compatible(other)
        top = max(len(self.kernels), len(other.kernels))
        return self._like([self.kernel(n) + other.kernel(n) for n in range(top)], max(self.n_max, other.n_max))

    __radd__ = __add__

    def __mul__(self, c):
        if isinstance(c, ChaosVector):
            return multiply(self, c)
        return self._like([float(c) * k for k in self.kernels])

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other if isinstance(other, ChaosVector) else -float(other))

    def evaluate(self, paths: Paths) -> np.ndarray:
        """``F`` on each path."""
        self._check_paths(paths)
        out = np.zeros(len(paths))
        for n, k in enumerate(self.kernels):
            if np.any(k):
                out += _integrate(k, n, paths, self.integrator)
        return out

    def mean(self) -> float:
        return float(self.kernels[0])

    def _check_paths(self, paths: Paths):
        if paths.grid != self.grid or paths.model != self.model:
            raise ValueError("paths were generated on a different grid or model")

    # serialization
    def to_dict(self) -> dict:
        return {
            "format": "chaos-vector", "version": CHAOS_FORMAT_VERSION,
            "integrator": self.integrator, "order": len(self.kernels) - 1, "n_max": self.n_max,
            "grid": self.grid.t.tolist(),
            "atoms": {"sizes": self.model.z.tolist(), "intensities": self.model.lam.tolist(),
                      "brownian": self.model.brownian},
            "kernels": [k.tolist() for k in self.kernels],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChaosVector":
        if d.get("format") != "chaos-vector" or d.get("version") != CHAOS_FORMAT_VERSION:
            raise ValueError("not a chaos-vector document of a supported version")
        atoms = d["atoms"]
        model = LevyModel(tuple(atoms["sizes"]), tuple(atoms["intensities"]), bool(atoms["brownian"]))
        ks = tuple(np.asarray(k, dtype=float) for k in d["kernels"])
        if len(ks) - 1 != d["order"]:
            raise ValueError("order field does not match the number of kernels")
        return cls(d["integrator"], TimeGrid(np.asarray(d["grid"])), model, ks, int(d["n_max"]))

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_json(cls, path: str | Path) -> "ChaosVector":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class ChaosProcess:
    """A chaos-valued process indexed by slot: ``u(s) = sum_n I_n(g_n(., s))``.

    ``kernels[n]`` has shape ``(S,) * n + (S,)`` and is symmetric in its first n axes.
    """

    integrator: str
    grid: TimeGrid
    model: LevyModel
    kernels: tuple
    n_max: int = 4

    def __post_init__(self):
        S = n_slots(self.grid, self.model, self.integrator)
        ks = []
        for n, k in enumerate(self.kernels):
            k = np.array(k, dtype=float)
            if k.shape != (S,) * (n + 1):
                raise ValueError(f"process kernel of order {n} must have shape {(S,) * (n + 1)}")
            if not is_symmetric(k, n):
                raise ValueError(f"process kernel of order {n} is not symmetric in its chaos slots")
            k.setflags(write=False)
            ks.append(k)
        object.__setattr__(self, "kernels", tuple(ks))

    @classmethod
    def deterministic(cls, f, integrator, grid, model, n_max: int = 4) -> "ChaosProcess":
        return cls(integrator, grid, model, (np.asarray(f, dtype=float),), n_max)

    @property
    def order(self) -> int:
        for n in range(len(self.kernels) - 1, -1, -1):
            if np.any(self.kernels[n]):
                return n
        return 0

    def at(self, slot: int) -> ChaosVector:
        return ChaosVector(self.integrator, self.grid, self.model,
                           tuple(k[..., slot] for k in self.kernels), self.n_max)

    def evaluate(self, paths: Paths) -> np.ndarray:
        """``u(s)`` on each path and slot, shape (n_paths, S)."""
        out = np.zeros((len(paths), n_slots(self.grid, self.model, self.integrator)))
        for n, k in enumerate(self.kernels):
            if np.any(k):
                out += _integrate(k, n, paths, self.integrator)
        return out

    def norm2(self) -> float:
        """``E[int u(s)^2 ds]`` (with the jump measure for Poisson)."""
        w = slot_weights(self.grid, self.model, self.integrator)
        return sum(math.factorial(n) * _norm2(k, np.broadcast_to(w, w.shape)) for n, k in enumerate(self.kernels))

    def __add__(self, other: "ChaosProcess") -> "ChaosProcess":
        top = max(len(self.kernels), len(other.kernels))
        S = n_slots(self.grid, self.model, self.integrator)

        def k(p, n):
            return p.kernels[n] if n < len(p.kernels) else np.zeros((S,) * (n + 1))

        return ChaosProcess(self.integrator, self.grid, self.model,
                            tuple(k(self, n) + k(other, n) for n in range(top)), max(self.n_max, other.n_max))


def chaos_norm(F: ChaosVector) -> float:
    """``E[F^2] = sum_n n! ||f_n||^2`` under the slot product measure."""
    w = F.weights
    return sum(math.factorial(n) * _norm2(k, w) for n, k in enumerate(F.kernels))


def inner(F: ChaosVector, G: ChaosVector) -> float:
    """``E[F G] = sum_n n! <f_n, g_n>``."""
    F._check_compatible(G)
    w = F.weights
    total = 0.0
    for n in range(min(len(F.kernels), len(G.kernels))):
        prod = F.kernels[n] * G.kernels[n]
        for _ in range(n):
            prod = prod @ w
        total += math.factorial(n) * float(prod)
    return total


def _derivative_process(F: ChaosVector) -> ChaosProcess:
    # D_s F = sum_n n I_{n-1}(f_n(., s)); f_n symmetric so pin the last axis.
    ks = [n * F.kernels[n] for n in range(1, len(F.kernels))]
    if not ks:
        ks = [np.zeros(F.n_slots)]
    return ChaosProcess(F.integrator, F.grid, F.model, tuple(ks), max(F.n_max - 1, 0))


def malliavin_D_process(F: ChaosVector) -> ChaosProcess:
    if F.integrator != BROWNIAN:
        raise ValueError("malliavin_D needs a Brownian chaos vector")
    return _derivative_process(F)


def malliavin_Dz_process(F: ChaosVector) -> ChaosProcess:
    if F.integrator != POISSON:
        raise ValueError("malliavin_Dz needs a Poisson chaos vector")
    return _derivative_process(F)


def malliavin_D(F: ChaosVector, cell: int) -> ChaosVector:
    """``D_t F`` for ``t`` in ``cell``."""
    return malliavin_D_process(F).at(slot_of(F.grid, F.model, BROWNIAN, cell))


def malliavin_Dz(F: ChaosVector, cell: int, atom: int) -> ChaosVector:
    """``D_{t,z} F`` for ``t`` in ``cell`` and ``z`` the atom's jump size."""
    return malliavin_Dz_process(F).at(slot_of(F.grid, F.model, POISSON, cell, atom))


def derivative_norm(F: ChaosVector) -> float:
    """``int E[(D F)^2]`` computed from the derivative kernels."""
    return _derivative_process(F).norm2()


def derivative_norm_formula(F: ChaosVector) -> float:
    """``sum_n n * n! * ||f_n||^2``."""
    w = F.weights
    return sum(n * math.factorial(n) * _norm2(k, w) for n, k in enumerate(F.kernels))


def skorohod(u: ChaosProcess) -> ChaosVector:
    """Skorohod integral: ``delta(u) = sum_n I_{n+1}(sym g_n)``."""
    top = len(u.kernels)
    while top > 1 and not np.any(u.kernels[top - 1]):
        top -= 1
    if top > u.n_max:
        raise ChaosOrderError(f"skorohod integral of order {top} exceeds n_max={u.n_max}")
    S = n_slots(u.grid, u.model, u.integrator)
    ks = [np.array(0.0)] + [symmetrize(u.kernels[n]) for n in range(top)]
    return ChaosVector(u.integrator, u.grid, u.model, tuple(ks), u.n_max)


def derivative_of_process(u: ChaosProcess) -> np.ndarray:
    """Kernels of ``D_t u(s)``: list over n of arrays ``(S,)*n + (S_s,) + (S_t,)``."""
    out = []
    for n in range(1, len(u.kernels)):
        # u(s) = sum I_n(g_n(., s)); D_t u(s) = sum n I_{n-1}(g_n(., t, s)) with t on the last chaos axis
        out.append(n * np.moveaxis(u.kernels[n], n - 1, -1))
    return out


def commutation_check(u: ChaosProcess) -> float:
    """Max abs difference of kernels between ``D_t delta(u)`` and ``u(t) + delta(D_t u)``."""
    lhs = _derivative_process(skorohod(u))
    S = n_slots(u.grid, u.model, u.integrator)
    Du = derivative_of_process(u)
    # delta over s of D_t u(s): order n-1 chaos + s axis, symmetrize first n axes (n-1 chaos + s), t stays last
    rhs = [np.asarray(u.kernels[0], dtype=float).copy()]
    for n in range(1, len(u.kernels)):
        rhs.append(np.array(u.kernels[n], dtype=float))
    for n, d in enumerate(Du, start=1):
        rhs[n] = rhs[n] + symmetrize(d, n)
    err = 0.0
    for n in range(max(len(lhs.kernels), len(rhs))):
        a = lhs.kernels[n] if n < len(lhs.kernels) else np.zeros((S,) * (n + 1))
        b = rhs[n] if n < len(rhs) else np.zeros((S,) * (n + 1))
        err = max(err, float(np.max(np.abs(a - b), initial=0.0)))
    return err


# --- products ----------------------------------------------------------------

def _contract(f: np.ndarray, g: np.ndarray, r: int, l: int, w: np.ndarray) -> np.ndarray:
    """Identify the last ``r`` axes of ``f`` and ``g``; integrate the last ``l`` of those."""
    n, m = f.ndim, g.ndim
    letters = iter(_LETTERS)
    fx = [next(letters) for _ in range(n - r)]
    gx = [next(letters) for _ in range(m - r)]
    shared = [next(letters) for _ in range(r - l)]
    summed = [next(letters) for _ in range(l)]
    spec = "".join(fx + shared + summed) + "," + "".join(gx + shared + summed)
    ops = [f, g]
    for s in summed:
        spec += "," + s
        ops.append(w)
    spec += "->" + "".join(fx + gx + shared)
    return np.einsum(spec, *ops, optimize=True)


def multiply(F: ChaosVector, G: ChaosVector) -> ChaosVector:
    """Chaos expansion of ``F G`` by the product formula for multiple integrals."""
    F._check_compatible(G)
    w = F.weights
    S = F.n_slots
    top = F.order + G.order
    out = [np.zeros((S,) * k) for k in range(top + 1)]
    for n in range(F.order + 1):
        f = F.kernels[n]
        if not np.any(f):
            continue
        for m in range(G.order + 1):
            g = G.kernels[m]
            if not np.any(g):
                continue
            for r in range(min(n, m) + 1):
                c = math.factorial(r) * math.comb(n, r) * math.comb(m, r)
                ls = [r] if F.integrator == BROWNIAN else range(r + 1)
                for l in ls:
                    k = _contract(f, g, r, l, w)
                    out[n + m - r - l] += c * math.comb(r, l) * symmetrize(k)
    return ChaosVector(F.integrator, F.grid, F.model, tuple(out), max(F.n_max, G.n_max, top))


def polynomial_of(phi, Fs: list[ChaosVector], symbols=None) -> ChaosVector:
    """Chaos expansion of a polynomial ``phi(F_1, ..., F_m)``."""
    if symbols is None:
        symbols = sp.symbols(f"x0:{len(Fs)}", real=True)
    poly = sp.Poly(sp.sympify(phi), *symbols)
    F0 = Fs[0]
    result = ChaosVector.constant(0.0, F0.integrator, F0.grid, F0.model, F0.n_max)
    for powers, coeff in poly.terms():
        term = ChaosVector.constant(float(coeff), F0.integrator, F0.grid, F0.model, F0.n_max)
        for F, p in zip(Fs, powers):
            for _ in range(p):
                term = multiply(term, F)
        result = result + term
    return result


# --- checks ------------------------------------------------------------------

@dataclass(frozen=True)
class ChainRuleCheck:
    lhs: np.ndarray
    rhs: np.ndarray

    @property
    def max_abs_error(self) -> float:
        return float(np.max(np.abs(self.lhs - self.rhs), initial=0.0))


def chain_rule_brownian(phi, Fs: list[ChaosVector], paths: Paths, symbols=None) -> ChainRuleCheck:
    """``D_t phi(F)`` from the chaos algebra versus ``sum_i d_i phi(F) D_t F_i`` on paths."""
    if symbols is None:
        symbols = sp.symbols(f"x0:{len(Fs)}", real=True)
    phi = sp.sympify(phi)
    lhs = malliavin_D_process(polynomial_of(phi, Fs, symbols)).evaluate(paths)
    vals = [F.evaluate(paths) for F in Fs]
    rhs = np.zeros_like(lhs)
    for s, F in zip(symbols, Fs):
        dphi = np.broadcast_to(np.asarray(sp.lambdify(symbols, sp.diff(phi, s))(*vals), dtype=float), (len(paths),))
        rhs += dphi[:, None] * malliavin_D_process(F).evaluate(paths)
    return ChainRuleCheck(lhs, rhs)


def chain_rule_poisson(phi, Fs: list[ChaosVector], paths: Paths, symbols=None) -> ChainRuleCheck:
    """``D_{t,z} phi(F)`` from the chaos algebra versus ``phi(F + D F) - phi(F)`` on paths."""
    if symbols is None:
        symbols = sp.symbols(f"x0:{len(Fs)}", real=True)
    phi = sp.sympify(phi)
    lhs = malliavin_Dz_process(polynomial_of(phi, Fs, symbols)).evaluate(paths)
    fn = sp.lambdify(symbols, phi)
    vals = [F.evaluate(paths)[:, None] for F in Fs]
    shifted = [v + malliavin_Dz_process(F).evaluate(paths) for v, F in zip(vals, Fs)]
    rhs = np.broadcast_to(np.asarray(fn(*shifted), dtype=float) - np.asarray(fn(*vals), dtype=float), lhs.shape)
    return ChainRuleCheck(lhs, np.array(rhs))


def duality_check_brownian(F: ChaosVector, u: np.ndarray, paths: Paths) -> DualityResult:
    """Monte Carlo ``E[F int u dB]`` versus ``E[int u D_t F dt]`` for adapted ``u`` of shape (n, N)."""
    if F.integrator != BROWNIAN:
        raise ValueError("Brownian duality needs a Brownian chaos vector")
    u = np.asarray(u, dtype=float)
    lhs = F.evaluate(paths) * np.sum(u * paths.dB, axis=1)
    rhs = np.sum(u * malliavin_D_process(F).evaluate(paths) * paths.grid.dt, axis=1)
    return _paired(lhs, rhs)


def duality_check_poisson(F: ChaosVector, psi: np.ndarray, paths: Paths) -> DualityResult:
    """Monte Carlo ``E[F int int psi dÑ]`` versus ``E[int int psi D_{t,z} F nu(dz) dt]``; ``psi`` is (n, N, A)."""
    if F.integrator != POISSON:
        raise ValueError("Poisson duality needs a Poisson chaos vector")
    psi = np.asarray(psi, dtype=float).reshape(len(paths), -1)
    w = slot_weights(paths.grid, paths.model, POISSON)
    dNt = paths.dN_tilde.reshape(len(paths), -1)
    lhs = F.evaluate(paths) * np.sum(psi * dNt, axis=1)
    rhs = np.sum(psi * malliavin_Dz_process(F).evaluate(paths) * w, axis=1)
    return _paired(lhs, rhs)


def duality_exact(F: ChaosVector, u: ChaosProcess) -> tuple[float, float]:
    """Exact ``(E[F delta(u)], E[<u, D F>])`` from kernels."""
    lhs = inner(F, skorohod(u))
    Dp = _derivative_process(F)
    w = slot_weights(F.grid, F.model, F.integrator)
    rhs = 0.0
    for n in range(min(len(Dp.kernels), len(u.kernels))):
        prod = Dp.kernels[n] * u.kernels[n]
        for _ in range(n + 1):
            prod = prod @ w
        rhs += math.factorial(n) * float(prod)
    return lhs, rhs

"""Reproducible Brownian / compound-Poisson noise on a fixed time grid.

Every path owns a counter-based Philox substream keyed by ``(seed, path_id)``,
so the draws for path ``k`` never depend on how many paths are generated, on
block sizes, or on how work is split across threads.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

CACHE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TimeGrid:
    t: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("time grid needs at least two points")
        if not np.all(np.isfinite(t)):
            raise ValueError("time grid contains non-finite points")
        if t[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "t", t)

    @classmethod
    def uniform(cls, T: float, n_cells: int) -> "TimeGrid":
        if n_cells < 1 or not T > 0:
            raise ValueError("need T > 0 and at least one cell")
        return cls(np.linspace(0.0, T, n_cells + 1))

    @property
    def T(self) -> float:
        return float(self.t[-1])

    @property
    def n_cells(self) -> int:
        return self.t.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.t)

    @property
    def is_uniform(self) -> bool:
        dt = self.dt
        return bool(np.allclose(dt, dt[0], rtol=1e-12, atol=0.0))

    def index_at_or_before(self, s: float) -> int:
        """Largest grid index whose time is <= s (clamped to [0, N])."""
        s = max(0.0, s)
        k = int(np.searchsorted(self.t, s + 1e-12 * self.T, side="right")) - 1
        return min(max(k, 0), self.n_cells)

    def trapezoid_weights(self, start: int = 0) -> np.ndarray:
        """Trapezoid weights on grid points ``start..N`` (length N+1, zero before start)."""
        w = np.zeros(self.t.size)
        dt = self.dt[start:]
        w[start:-1] += dt / 2
        w[start + 1:] += dt / 2
        return w

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.t, other.t)

    def __hash__(self):
        return hash(self.t.tobytes())


@dataclass(frozen=True)
class LevyModel:
    """Brownian motion plus finitely many jump atoms ``(size, intensity)``.

    The Lévy measure is ``sum_i intensity_i * delta_{size_i}``.
    """

    sizes: tuple[float, ...] = ()
    intensities: tuple[float, ...] = ()
    brownian: bool = True

    def __post_init__(self):
        sizes = tuple(float(z) for z in self.sizes)
        lams = tuple(float(l) for l in self.intensities)
        if len(sizes) != len(lams):
            raise ValueError("sizes and intensities differ in length")
        if any(z == 0.0 or not math.isfinite(z) for z in sizes):
            raise ValueError("jump sizes must be finite and nonzero")
        if any(l < 0.0 or not math.isfinite(l) for l in lams):
            raise ValueError("intensities must be finite and non-negative")
        if len(set(sizes)) != len(sizes):
            raise ValueError("jump sizes must be pairwise distinct")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "intensities", lams)

    @classmethod
    def single_atom(cls, size: float, intensity: float, brownian: bool = True) -> "LevyModel":
        return cls((size,), (intensity,), brownian)

    @property
    def n_atoms(self) -> int:
        return len(self.sizes)

    @property
    def z(self) -> np.ndarray:
        return np.array(self.sizes, dtype=float)

    @property
    def lam(self) -> np.ndarray:
        return np.array(self.intensities, dtype=float)

    def second_moment(self) -> float:
        return float(np.sum(self.lam * self.z**2))


@dataclass(frozen=True, eq=False)
class PathBundle:
    """One simulated scenario."""

    grid: TimeGrid
    model: LevyModel
    dB: np.ndarray          # (N,)
    counts: np.ndarray      # (N, A) jump counts per cell and atom
    path_id: int

    @property
    def jumps(self) -> list[tuple[int, int, int]]:
        """Nonzero ``(cell, atom, count)`` triples."""
        cells, atoms = np.nonzero(self.counts)
        return [(int(c), int(a), int(self.counts[c, a])) for c, a in zip(cells, atoms)]

    @property
    def B(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.dB)])


def compensated_measure_increment(bundle: PathBundle, cell: int, atom: int) -> float:
    """Ñ-mass of ``atom`` in ``cell``: count minus ``intensity * dt``."""
    N, A = bundle.counts.shape
    if not (0 <= cell < N) or not (0 <= atom < A):
        raise IndexError(f"cell {cell} / atom {atom} out of range ({N} cells, {A} atoms)")
    return float(bundle.counts[cell, atom] - bundle.model.intensities[atom] * bundle.grid.dt[cell])


@dataclass(frozen=True, eq=False)
class Paths:
    """A batch of scenarios stored as arrays, indexable into :class:`PathBundle`."""

    grid: TimeGrid
    model: LevyModel
    dB: np.ndarray          # (n, N)
    counts: np.ndarray      # (n, N, A)
    path_ids: np.ndarray    # (n,)
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return self.dB.shape[0]

    def __getitem__(self, k: int) -> PathBundle:
        return PathBundle(self.grid, self.model, self.dB[k], self.counts[k], int(self.path_ids[k]))

    def __iter__(self) -> Iterator[PathBundle]:
        return (self[k] for k in range(len(self)))

    @property
    def n_paths(self) -> int:
        return len(self)

    @property
    def B(self) -> np.ndarray:
        """Brownian path on grid points, shape (n, N+1)."""
        if "B" not in self.cache:
            B = np.zeros((len(self), self.grid.n_cells + 1))
            np.cumsum(self.dB, axis=1, out=B[:, 1:])
            self.cache["B"] = B
        return self.cache["B"]

    @property
    def dN_tilde(self) -> np.ndarray:
        """Compensated counts per cell and atom, shape (n, N, A)."""
        if "dNt" not in self.cache:
            comp = self.grid.dt[:, None] * self.model.lam[None, :]
            self.cache["dNt"] = self.counts - comp[None]
        return self.cache["dNt"]

    @property
    def eta(self) -> np.ndarray:
        """Pure-jump martingale ``sum_i z_i Ñ_i`` on grid points, shape (n, N+1)."""
        if "eta" not in self.cache:
            inc = self.dN_tilde @ self.model.z if self.model.n_atoms else np.zeros(self.dB.shape)
            eta = np.zeros((len(self), self.grid.n_cells + 1))
            np.cumsum(inc, axis=1, out=eta[:, 1:])
            self.cache["eta"] = eta
        return self.cache["eta"]

    def total_counts(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def subset(self, idx) -> "Paths":
        return Paths(self.grid, self.model, self.dB[idx], self.counts[idx], self.path_ids[idx])

    def with_increments(self, dB: np.ndarray | None = None, counts: np.ndarray | None = None) -> "Paths":
        """Copy with replaced noise (used for bump and add-one-jump oracles)."""
        return Paths(self.grid, self.model,
                     self.dB if dB is None else dB,
                     self.counts if counts is None else counts,
                     self.path_ids)

    def save(self, path: str | Path) -> None:
        np.savez_compressed(
            path, version=CACHE_FORMAT_VERSION, t=self.grid.t, sizes=self.model.z,
            intensities=self.model.lam, brownian=self.model.brownian,
            dB=self.dB, counts=self.counts, path_ids=self.path_ids)

    @classmethod
    def load(cls, path: str | Path) -> "Paths":
        with np.load(path) as f:
            if int(f["version"]) != CACHE_FORMAT_VERSION:
                raise ValueError(f"unsupported path cache version {int(f['version'])}")
            model = LevyModel(tuple(f["sizes"]), tuple(f["intensities"]), bool(f["brownian"]))
            return cls(TimeGrid(f["t"]), model, f["dB"], f["counts"], f["path_ids"])


def _stream_key(seed: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(2, np.uint64)


def _draw_path(key, path_id, grid: TimeGrid, model: LevyModel):
    rng = np.random.Generator(np.random.Philox(key=key, counter=[0, 0, 0, path_id]))
    dt = grid.dt
    if model.brownian:
        dB = rng.standard_normal(dt.size) * np.sqrt(dt)
    else:
        dB = np.zeros(dt.size)
    if model.n_atoms:
        counts = rng.poisson(dt[:, None] * model.lam[None, :])
    else:
        counts = np.zeros((dt.size, 0), dtype=np.int64)
    return dB, counts


def _check_seed(seed) -> int:
    if isinstance(seed, (bool, np.bool_)) or not isinstance(seed, (int, np.integer)):
        if isinstance(seed, float) and math.isfinite(seed) and seed == int(seed):
            seed = int(seed)
        else:
            raise ValueError(f"seed must be a finite integer, got {seed!r}")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return int(seed)


def generate_paths(model: LevyModel, grid: TimeGrid, n_paths: int, seed: int,
                   first_path: int = 0, workers: int = 1) -> Paths:
    """Simulate ``n_paths`` scenarios with ids ``first_path, first_path+1, ...``."""
    if grid is None or grid.n_cells < 1:
        raise ValueError("empty grid")
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    seed = _check_seed(seed)
    key = _stream_key(seed)
    ids = np.arange(first_path, first_path + n_paths, dtype=np.int64)
    N, A = grid.n_cells, model.n_atoms
    dB = np.empty((n_paths, N))
    counts = np.empty((n_paths, N, A), dtype=np.int64)

    def fill(rows: range):
        for r in rows:
            dB[r], counts[r] = _draw_path(key, int(ids[r]), grid, model)

    if workers <= 1:
        fill(range(n_paths))
    else:
        chunk = math.ceil(n_paths / workers)
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(fill, [range(i, min(i + chunk, n_paths)) for i in range(0, n_paths, chunk)]))
    return Paths(grid, model, dB, counts, ids)


@dataclass(frozen=True)
class PathSource:
    """Lazily generated path collection, consumed block by block.

    Block boundaries are fixed by ``block_size`` so any reduction performed in
    block order is independent of the number of worker threads.
    """

    model: LevyModel
    grid: TimeGrid
    n_paths: int
    seed: int
    block_size: int = 4096

    def block_ranges(self) -> list[tuple[int, int]]:
        return [(s, min(s + self.block_size, self.n_paths))
                for s in range(0, self.n_paths, self.block_size)]

    def block(self, i: int) -> Paths:
        s, e = self.block_ranges()[i]
        return generate_paths(self.model, self.grid, e - s, self.seed, first_path=s)

    def blocks(self) -> Iterator[Paths]:
        for i in range(len(self.block_ranges())):
            yield self.block(i)

    def map_blocks(self, fn, workers: int = 1) -> list:
        """``[fn(block) for block in blocks]`` in block order, optionally threaded."""
        n = len(self.block_ranges())
        if workers <= 1:
            return [fn(self.block(i)) for i in range(n)]
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(lambda i: fn(self.block(i)), range(n)))

    def materialize(self) -> Paths:
        return generate_paths(self.model, self.grid, self.n_paths, self.seed)


def concat_paths(parts: Sequence[Paths]) -> Paths:
    first = parts[0]
    return Paths(first.grid, first.model,
                 np.concatenate([p.dB for p in parts]),
                 np.concatenate([p.counts for p in parts]),
                 np.concatenate([p.path_ids for p in parts]))

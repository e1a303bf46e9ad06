import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from malliavin_smp.noise import (LevyModel, PathSource, Paths, TimeGrid, compensated_measure_increment,
                                 concat_paths, generate_paths)


def test_no_noise_sources_give_zero_increments():
    g = TimeGrid.uniform(1.0, 10)
    P = generate_paths(LevyModel((), (), brownian=False), g, 5, 0)
    assert np.all(P.dB == 0.0)
    assert P.counts.shape == (5, 10, 0)


def test_poisson_total_count_mean():
    g = TimeGrid.uniform(1.0, 1000)
    src = PathSource(LevyModel.single_atom(1.0, 2.0, brownian=False), g, 100_000, 11, block_size=20_000)
    total = np.concatenate([b.total_counts()[:, 0] for b in src.blocks()])
    assert abs(total.mean() - 2.0) < 3 * np.sqrt(2.0 / 100_000)


def test_worker_count_does_not_change_paths():
    g = TimeGrid.uniform(1.0, 50)
    m = LevyModel((0.5, -1.0), (1.0, 3.0))
    a = generate_paths(m, g, 4, 7, workers=1)
    b = generate_paths(m, g, 4, 7, workers=4)
    assert np.array_equal(a.dB, b.dB) and np.array_equal(a.counts, b.counts)


def test_blocks_match_one_shot_generation():
    g = TimeGrid.uniform(1.0, 20)
    m = LevyModel.single_atom(0.3, 2.0)
    src = PathSource(m, g, 1000, 3, block_size=128)
    whole = generate_paths(m, g, 1000, 3)
    joined = concat_paths(list(src.blocks()))
    assert np.array_equal(joined.dB, whole.dB)
    assert np.array_equal(joined.path_ids, whole.path_ids)


def test_compensated_increment_examples():
    g = TimeGrid.uniform(1.0, 100)
    m = LevyModel.single_atom(1.0, 1.0, brownian=False)
    P = generate_paths(m, g, 1, 0)
    counts = np.zeros((1, 100, 1), dtype=np.int64)
    counts[0, 3, 0] = 1
    P = P.with_increments(counts=counts)
    assert compensated_measure_increment(P[0], 0, 0) == pytest.approx(-0.01)
    assert compensated_measure_increment(P[0], 3, 0) == pytest.approx(0.99)
    with pytest.raises(IndexError):
        compensated_measure_increment(P[0], 100, 0)


def test_increment_moments():
    g = TimeGrid.uniform(1.0, 5)
    m = LevyModel((1.0, 2.0), (1.0, 0.5))
    P = generate_paths(m, g, 20_000, 5)
    n = len(P)
    for k in range(5):
        dB = P.dB[:, k]
        assert abs(dB.mean()) < 3 * dB.std() / np.sqrt(n)
        sq = dB**2
        assert abs(sq.mean() - g.dt[k]) < 3 * sq.std() / np.sqrt(n)
        for i in range(2):
            x = P.dN_tilde[:, k, i]
            assert abs(x.mean()) < 3 * x.std() / np.sqrt(n)


def test_rejects_bad_inputs():
    g = TimeGrid.uniform(1.0, 4)
    m = LevyModel()
    for seed in (float("nan"), 1.5, -1, "7"):
        with pytest.raises(ValueError):
            generate_paths(m, g, 2, seed)
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0, 0.5, 0.5]))
    with pytest.raises(ValueError):
        LevyModel((1.0,), (-1.0,))
    with pytest.raises(ValueError):
        LevyModel((0.0,), (1.0,))


def test_cache_roundtrip(tmp_path):
    g = TimeGrid.uniform(1.0, 8)
    P = generate_paths(LevyModel.single_atom(0.5, 1.0), g, 10, 1)
    P.save(tmp_path / "p.npz")
    Q = Paths.load(tmp_path / "p.npz")
    assert np.array_equal(P.dB, Q.dB) and np.array_equal(P.counts, Q.counts) and Q.grid == g


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**40), first=st.integers(0, 1000), n=st.integers(1, 6))
def test_path_depends_only_on_seed_and_id(seed, first, n):
    g = TimeGrid.uniform(1.0, 6)
    m = LevyModel.single_atom(1.0, 1.0)
    whole = generate_paths(m, g, first + n, seed)
    part = generate_paths(m, g, n, seed, first_path=first)
    assert np.array_equal(whole.dB[first:], part.dB)
    assert np.array_equal(whole.counts[first:], part.counts)


@settings(max_examples=25, deadline=None)
@given(T=st.floats(0.1, 10.0), N=st.integers(1, 50))
def test_trapezoid_weights_integrate_linear_exactly(T, N):
    g = TimeGrid.uniform(T, N)
    w = g.trapezoid_weights()
    assert np.sum(w) == pytest.approx(T, rel=1e-12)
    assert np.sum(w * g.t) == pytest.approx(T**2 / 2, rel=1e-12)

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from malliavin_smp import chaos as ch
from malliavin_smp.noise import LevyModel, TimeGrid, generate_paths

GRID = TimeGrid.uniform(1.0, 5)
MODEL = LevyModel((1.0, -0.5), (1.0, 2.0))
ONE_ATOM = LevyModel.single_atom(1.0, 1.0)


@pytest.fixture(scope="module")
def paths():
    return generate_paths(MODEL, GRID, 2000, 3)


@pytest.fixture(scope="module")
def one_atom_paths():
    return generate_paths(ONE_ATOM, GRID, 2000, 4)


def vec(integ, kernels, model=MODEL):
    return ch.ChaosVector.from_kernels(integ, GRID, model, kernels)


def rand_sym(rng, n, S):
    return ch.symmetrize(rng.normal(size=(S,) * n))


def test_iterated_integral_examples(paths, one_atom_paths):
    S = GRID.n_cells
    assert np.allclose(ch.iterated_integral(np.ones(S), paths), paths.B[:, -1], atol=1e-12)
    assert np.allclose(ch.iterated_integral(np.ones((S, S)), paths), paths.B[:, -1] ** 2 - 1.0, atol=1e-12)
    P = one_atom_paths
    eta = ch.iterated_integral(np.ones(S), P, ch.POISSON)
    assert np.allclose(eta, P.counts[:, :, 0].sum(axis=1) - 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        ch.iterated_integral(np.triu(np.ones((S, S))), paths)


def test_chaos_norm_examples(paths):
    S = GRID.n_cells
    assert ch.chaos_norm(vec(ch.BROWNIAN, {1: np.ones(S)})) == pytest.approx(1.0, rel=1e-14)
    F = vec(ch.BROWNIAN, {1: np.ones(S), 2: np.ones((S, S))})
    assert ch.chaos_norm(F) == pytest.approx(3.0, rel=1e-14)
    big = generate_paths(MODEL, GRID, 100_000, 9)
    v = F.evaluate(big) ** 2
    assert abs(v.mean() - 3.0) < 3 * v.std(ddof=1) / np.sqrt(v.size)


def test_derivative_examples():
    rng = np.random.default_rng(0)
    S = GRID.n_cells
    f = rng.normal(size=S)
    F = vec(ch.BROWNIAN, {1: f})
    for k in range(S):
        Dk = ch.malliavin_D(F, k)
        assert Dk.order == 0 and Dk.kernels[0] == pytest.approx(f[k])
    assert ch.malliavin_D(ch.ChaosVector.constant(3.0, ch.BROWNIAN, GRID, MODEL), 2).kernels[0] == 0.0
    Sp = ch.n_slots(GRID, MODEL, ch.POISSON)
    g = rng.normal(size=Sp)
    G = vec(ch.POISSON, {1: g})
    assert ch.malliavin_Dz(G, 3, 1).kernels[0] == pytest.approx(g[ch.slot_of(GRID, MODEL, ch.POISSON, 3, 1)])
    with pytest.raises(ValueError):
        ch.malliavin_D(G, 0)
    with pytest.raises(ValueError):
        ch.malliavin_Dz(F, 0, 0)


@pytest.mark.parametrize("integ", ch.INTEGRATORS)
def test_isometries_exact(integ):
    rng = np.random.default_rng(1)
    S = ch.n_slots(GRID, MODEL, integ)
    F = vec(integ, {0: 0.3, 1: rand_sym(rng, 1, S), 2: rand_sym(rng, 2, S), 3: rand_sym(rng, 3, S)})
    assert ch.multiply(F, F).mean() == pytest.approx(ch.chaos_norm(F), rel=1e-12)
    assert ch.derivative_norm(F) == pytest.approx(ch.derivative_norm_formula(F), rel=1e-12)


@pytest.mark.parametrize("integ", ch.INTEGRATORS)
def test_orthogonality(integ, paths):
    rng = np.random.default_rng(2)
    S = ch.n_slots(GRID, MODEL, integ)
    A, B = vec(integ, {1: rand_sym(rng, 1, S)}), vec(integ, {2: rand_sym(rng, 2, S)})
    assert ch.inner(A, B) == 0.0
    v = A.evaluate(paths) * B.evaluate(paths)
    assert abs(v.mean()) < 3 * v.std(ddof=1) / np.sqrt(v.size)


def test_skorohod_examples(paths):
    S = GRID.n_cells
    f = np.arange(1.0, S + 1)
    u = ch.ChaosProcess.deterministic(f, ch.BROWNIAN, GRID, MODEL)
    d = ch.skorohod(u)
    assert np.allclose(d.kernels[1], f) and d.order == 1
    # u(s) = B(s) on the left point of cell s: kernel 1{r < s}
    Bk = np.tril(np.ones((S, S)), -1)
    uB = ch.ChaosProcess(ch.BROWNIAN, GRID, MODEL, (np.zeros(S), Bk))
    ito = np.sum(paths.B[:, :-1] * paths.dB, axis=1)
    assert np.allclose(ch.skorohod(uB).evaluate(paths), ito, atol=1e-12)
    assert ch.commutation_check(uB) <= 1e-12


@pytest.mark.parametrize("integ", ch.INTEGRATORS)
def test_commutation_random(integ):
    rng = np.random.default_rng(3)
    S = ch.n_slots(GRID, MODEL, integ)
    u = ch.ChaosProcess(integ, GRID, MODEL, (rng.normal(size=S), ch.symmetrize(rng.normal(size=(S, S)), 1),
                                             ch.symmetrize(rng.normal(size=(S, S, S)), 2)))
    assert ch.commutation_check(u) <= 1e-12 * max(1.0, max(np.abs(k).max() for k in u.kernels))


def test_skorohod_order_overflow():
    S = GRID.n_cells
    u = ch.ChaosProcess(ch.BROWNIAN, GRID, MODEL, (np.zeros(S), np.zeros((S, S)), np.zeros((S,) * 3),
                                                   ch.symmetrize(np.ones((S,) * 4), 3)), n_max=3)
    with pytest.raises(ch.ChaosOrderError):
        ch.skorohod(u)


def test_duality_examples(paths, one_atom_paths):
    S, n = GRID.n_cells, len(paths)
    BT = vec(ch.BROWNIAN, {1: np.ones(S)})
    r = ch.duality_check_brownian(BT, np.ones((n, S)), paths)
    assert r.rhs == pytest.approx(1.0) and abs(r.lhs - r.rhs) < 3 * r.stderr
    BT2 = vec(ch.BROWNIAN, {0: 1.0, 2: np.ones((S, S))})
    r = ch.duality_check_brownian(BT2, paths.B[:, :-1], paths)
    assert abs(r.lhs - r.rhs) < 3 * r.stderr
    r = ch.duality_check_brownian(ch.ChaosVector.constant(2.0, ch.BROWNIAN, GRID, MODEL), np.ones((n, S)), paths)
    assert r.rhs == 0.0 and abs(r.lhs) < 3 * r.stderr
    P = one_atom_paths
    eta = ch.ChaosVector.from_kernels(ch.POISSON, GRID, ONE_ATOM, {1: np.ones(S)})
    r = ch.duality_check_poisson(eta, np.ones((len(P), S, 1)), P)
    assert r.rhs == pytest.approx(1.0) and abs(r.lhs - r.rhs) < 3 * r.stderr
    I2 = ch.ChaosVector.from_kernels(ch.POISSON, GRID, ONE_ATOM, {2: np.ones((S, S))})
    r = ch.duality_check_poisson(I2, np.ones((len(P), S, 1)), P)
    _, exact = ch.duality_exact(I2, ch.ChaosProcess.deterministic(np.ones(S), ch.POISSON, GRID, ONE_ATOM))
    assert abs(r.lhs - exact) < 3 * r.stderr


def test_chain_rule_examples(paths, one_atom_paths):
    x, y = sp.symbols("x0 x1", real=True)
    S = GRID.n_cells
    rng = np.random.default_rng(5)
    I1 = vec(ch.BROWNIAN, {1: np.ones(S)})
    assert ch.chain_rule_brownian(x**2, [I1], paths, (x,)).max_abs_error <= 1e-9
    assert ch.chain_rule_brownian(3 * x - 1, [I1], paths, (x,)).max_abs_error <= 1e-9
    f, g = rng.normal(size=S), rng.normal(size=S)
    Ff, Fg = vec(ch.BROWNIAN, {1: f}), vec(ch.BROWNIAN, {1: g})
    assert ch.chain_rule_brownian(x * y, [Ff, Fg], paths, (x, y)).max_abs_error <= 1e-9
    P = one_atom_paths
    eta = ch.ChaosVector.from_kernels(ch.POISSON, GRID, ONE_ATOM, {1: np.ones(S)})
    F = eta.evaluate(P)
    sq = ch.malliavin_Dz_process(ch.polynomial_of(x**2, [eta], (x,))).evaluate(P)
    assert np.allclose(sq, (2 * F + 1)[:, None], atol=1e-9)
    cube = ch.malliavin_Dz_process(ch.polynomial_of(x**3, [eta], (x,))).evaluate(P)
    assert np.allclose(cube, (3 * F**2 + 3 * F + 1)[:, None], atol=1e-9)
    assert ch.chain_rule_poisson(x**3, [eta], P, (x,)).max_abs_error <= 1e-9


def test_json_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    S = ch.n_slots(GRID, MODEL, ch.POISSON)
    F = vec(ch.POISSON, {0: 1.5, 2: rand_sym(rng, 2, S)})
    F.to_json(tmp_path / "f.json")
    G = ch.ChaosVector.from_json(tmp_path / "f.json")
    assert all(np.array_equal(a, b) for a, b in zip(F.kernels, G.kernels)) and G.grid == F.grid


def test_rejects_asymmetric_or_misshaped_kernels():
    S = GRID.n_cells
    with pytest.raises(ValueError):
        vec(ch.BROWNIAN, {2: np.triu(np.ones((S, S)))})
    with pytest.raises(ValueError):
        vec(ch.BROWNIAN, {1: np.ones(S + 1)})


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), integ=st.sampled_from(ch.INTEGRATORS))
def test_product_expectation_is_inner_product(seed, integ):
    rng = np.random.default_rng(seed)
    S = ch.n_slots(GRID, MODEL, integ)
    F = vec(integ, {0: rng.normal(), 1: rand_sym(rng, 1, S), 2: rand_sym(rng, 2, S)})
    G = vec(integ, {1: rand_sym(rng, 1, S), 2: rand_sym(rng, 2, S)})
    assert ch.multiply(F, G).mean() == pytest.approx(ch.inner(F, G), rel=1e-10, abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), integ=st.sampled_from(ch.INTEGRATORS))
def test_product_formula_is_pathwise(seed, integ):
    rng = np.random.default_rng(seed)
    S = ch.n_slots(GRID, MODEL, integ)
    P = generate_paths(MODEL, GRID, 50, seed)
    F = vec(integ, {1: rand_sym(rng, 1, S), 2: rand_sym(rng, 2, S)})
    G = vec(integ, {0: 0.5, 1: rand_sym(rng, 1, S)})
    assert np.allclose(ch.multiply(F, G).evaluate(P), F.evaluate(P) * G.evaluate(P), atol=1e-9)

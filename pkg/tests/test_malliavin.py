import numpy as np
import pytest
import sympy as sp

from malliavin_smp.malliavin import (Constant, Functional, Smooth, UnsupportedFunctional, WienerIntegral,
                                     brownian_at, compensated_count_at, derivative_Dt, derivative_Dz,
                                     duality_residual, exponential_martingale)
from malliavin_smp.noise import LevyModel, TimeGrid, generate_paths
from malliavin_smp.sde import Control, closed_form_linear, linear_coefficients, state_functional

GRID = TimeGrid.uniform(1.0, 50)
X = sp.Symbol("x", real=True)


@pytest.fixture(scope="module")
def bpaths():
    return generate_paths(LevyModel(), GRID, 4000, 1)


@pytest.fixture(scope="module")
def jpaths():
    return generate_paths(LevyModel.single_atom(1.0, 2.0), GRID, 4000, 2)


def test_wiener_integral_derivative(bpaths):
    f = np.sin(GRID.t[:-1])
    F = WienerIntegral(f, GRID)
    assert np.array_equal(F.dt_all(bpaths), np.broadcast_to(f, bpaths.dB.shape))
    assert np.all(derivative_Dt(F, bpaths, 0.5) == f[25])
    assert np.all(Constant(2.0).dt_all(bpaths) == 0.0)


def test_density_derivative(bpaths):
    NT = exponential_martingale(np.full(GRID.n_cells, 0.5), GRID)
    v = NT.value(bpaths)
    assert np.allclose(NT.dt_all(bpaths), -0.5 * v[:, None], rtol=1e-12)


def test_geometric_state_derivative_and_bump(bpaths):
    co = linear_coefficients(sigma=(0.0, 0.3, 0.0))
    F = state_functional(co, Control.constant(0.0), bpaths, 1.0)
    XT = F.value(bpaths)
    D = F.dt_all(bpaths)
    assert np.allclose(D, 0.3 * XT[:, None], rtol=1e-10)
    k, eps = 17, 1e-6
    dB = bpaths.dB.copy()
    dB[:, k] += eps
    up = closed_form_linear(co, Control.constant(0.0), bpaths.with_increments(dB=dB), 1.0).XT
    assert np.allclose((up - XT) / eps, D[:, k], rtol=1e-5)


def test_jump_derivatives(jpaths):
    eta2 = Smooth(X**2, [compensated_count_at(GRID, 1, 0, GRID.n_cells)], (X,))
    eta = compensated_count_at(GRID, 1, 0, GRID.n_cells).value(jpaths)
    assert np.allclose(eta2.dz_all(jpaths)[:, :, 0], (2 * eta + 1)[:, None], atol=1e-12)
    assert np.allclose(derivative_Dz(eta2, jpaths, 0.3, 1.0), 2 * eta + 1, atol=1e-12)
    with pytest.raises(ValueError):
        derivative_Dz(eta2, jpaths, 0.3, 7.0)


def test_state_add_one_jump_matches_resimulation(jpaths):
    co = linear_coefficients(b=(0.1, 0.2, 0.0), sigma=(0.0, 0.3, 0.0), theta=(0.05, 0.4, 0.0))
    F = state_functional(co, Control.constant(0.0), jpaths, 1.0)
    XT = F.value(jpaths)
    Dz = F.dz_all(jpaths)
    for k in (0, 23, 49):
        counts = jpaths.counts.copy()
        counts[:, k, 0] += 1
        up = closed_form_linear(co, Control.constant(0.0), jpaths.with_increments(counts=counts), 1.0).XT
        assert np.allclose(up - XT, Dz[:, k, 0], rtol=1e-10, atol=1e-12)


def test_duality_residual_brownian(bpaths):
    N = GRID.n_cells
    F = Smooth(X**2, [brownian_at(GRID, N)], (X,))
    r = duality_residual(F, [brownian_at(GRID, k) for k in range(N)], bpaths)
    assert r.z < 3
    r = duality_residual(exponential_martingale(np.full(N, 0.5), GRID), np.ones((len(bpaths), N)), bpaths)
    assert r.z < 3
    r = duality_residual(Constant(1.0), np.ones((len(bpaths), N)), bpaths)
    assert r.rhs == 0.0 and r.z < 3


def test_duality_residual_poisson(jpaths):
    N = GRID.n_cells
    F = Smooth(X**2, [compensated_count_at(GRID, 1, 0, N)], (X,))
    r = duality_residual(F, np.ones((len(jpaths), N, 1)), jpaths, kind="poisson")
    assert r.z < 3
    with pytest.raises(ValueError):
        duality_residual(F, np.ones((len(jpaths), N, 1)), jpaths, kind="levy")


def test_unsupported_functional_raises(bpaths):
    class Opaque(Functional):
        def value(self, paths):
            return np.ones(len(paths))

    with pytest.raises(UnsupportedFunctional):
        Opaque().dt(bpaths, 0)
    with pytest.raises(UnsupportedFunctional):
        (Opaque() * 2.0).dt_all(bpaths)


def test_functional_arithmetic(bpaths):
    W = brownian_at(GRID, GRID.n_cells)
    F = 3.0 * W - W * W + 1.0
    B = bpaths.B[:, -1]
    assert np.allclose(F.value(bpaths), 3 * B - B**2 + 1, atol=1e-12)
    assert np.allclose(F.dt_all(bpaths), (3 - 2 * B)[:, None], atol=1e-12)

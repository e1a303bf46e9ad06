import numpy as np
import pytest

from malliavin_smp.adjoint import (H1, compute_adjoint, compute_K, hamiltonian, hamiltonian_at,
                                   hamiltonian_u_partial, p_functional, running_tail)
from malliavin_smp.malliavin import UnsupportedFunctional
from malliavin_smp.noise import LevyModel, TimeGrid, generate_paths
from malliavin_smp.sde import Control, closed_form_linear, linear_coefficients, simulate_state

GRID = TimeGrid.uniform(1.0, 40)
MODEL = LevyModel.single_atom(0.5, 2.0)


@pytest.fixture(scope="module")
def paths():
    return generate_paths(MODEL, GRID, 500, 8)


def adjoint(co, paths, u=0.0, cells=(0, 20), x0=1.0):
    ctl = Control.constant(u)
    st = simulate_state(co, ctl, paths, x0, "exact")
    return compute_adjoint(co, ctl, paths, st, cells=list(cells)), st


def test_K_examples(paths):
    ctl = Control.constant(0.0)
    co = linear_coefficients(b=(0.1, 0.0, 1.0), running="-u**2/2", terminal="x")
    st = simulate_state(co, ctl, paths, 1.0)
    assert np.all(compute_K(co, ctl, paths, st).K == 1.0)
    co = linear_coefficients(running="x")
    st = simulate_state(co, ctl, paths, 1.0)
    assert np.allclose(compute_K(co, ctl, paths, st).K, (1.0 - GRID.t)[None, :], atol=1e-14)
    co = linear_coefficients(sigma=(0.3, 0.0, 0.0), terminal="x**2/2")
    st = simulate_state(co, ctl, paths, 1.0)
    K = compute_K(co, ctl, paths, st)
    assert np.allclose(K.K, st.XT[:, None], atol=1e-14)
    assert np.allclose(K.DtK, 0.3, atol=1e-14)


def test_running_tail_trapezoid():
    fx = GRID.t.copy()
    assert np.allclose(running_tail(fx, GRID), (1.0 - GRID.t**2) / 2, atol=1e-14)


def test_path_dependent_running_gradient_is_rejected(paths):
    co = linear_coefficients(sigma=(0.3, 0.0, 0.0), running="x**2")
    ctl = Control.constant(0.0)
    st = simulate_state(co, ctl, paths, 1.0)
    with pytest.raises(UnsupportedFunctional):
        compute_K(co, ctl, paths, st)


def test_x_independent_coefficients_give_p_equal_K(paths):
    co = linear_coefficients(b=(0.2, 0.0, 1.0), sigma=(0.3, 0.0, 0.0), theta=(0.1, 0.0, 0.0),
                             running="x - u**2/2", terminal="x**2/2")
    adj, st = adjoint(co, paths)
    assert np.all(adj.H0x == 0.0)
    assert np.array_equal(adj.p, adj.K)
    assert np.allclose(adj.p[:, -1], st.XT, atol=1e-14)


def test_q_r_for_additive_noise(paths):
    co = linear_coefficients(b=(0.2, 0.0, 0.0), sigma=(0.3, 0.0, 0.0), theta=(0.1, 0.0, 0.0), terminal="x**2/2")
    adj, st = adjoint(co, paths, cells=(0, 20))
    assert np.allclose(adj.q[:, [0, 20]], 0.3, atol=1e-12)
    assert np.all(np.isnan(adj.q[:, 5]))
    counts = paths.counts.copy()
    counts[:, 20, 0] += 1
    up = closed_form_linear(co, Control.constant(0.0), paths.with_increments(counts=counts), 1.0).XT
    assert np.allclose(adj.r[:, 20, 0], up - st.XT, atol=1e-12)


def test_terminal_condition_and_engine_cross_check(paths):
    co = linear_coefficients(b=(0.1, 0.2, 1.0), sigma=(0.2, 0.3, 0.0), theta=(0.1, 0.2, 0.0),
                             running="-u**2/2", terminal="x")
    sub = paths.subset(slice(0, 100))
    adj, st = adjoint(co, sub, u=0.4, cells=(0, 20))
    assert np.allclose(adj.p[:, -1], 1.0, atol=1e-12)
    for k in (0, 20):
        pf = p_functional(adj.kparts, co, sub, st, k)
        assert np.allclose(pf.value(sub), adj.p[:, k], atol=1e-10)
        assert np.allclose(pf.dt(sub, k), adj.q[:, k], atol=1e-9)
        assert np.allclose(pf.dz(sub, k, 0), adj.r[:, k, 0], atol=1e-9)


def test_hamiltonian_examples():
    co = linear_coefficients(b=(0.0, 0.5, 1.0), sigma=(0.2, 0.0, 0.0), theta=(0.0, 0.0, 0.3),
                             running="-u**2/2")
    H = hamiltonian(co, MODEL, 2.0, 1.0, np.array([4.0]), 0.0, 3.0, 1.0)
    # f = -1/2, b = 1.5 + 1, sigma = 0.2, theta*lambda uses the model's atom
    theta = co.theta(0.0, 3.0, 1.0, MODEL.sizes[0])
    assert H == pytest.approx(-0.5 + 2.0 * 2.5 + 1.0 * 0.2 + 4.0 * theta * MODEL.lam[0], rel=1e-14)
    assert H1(co, MODEL, 0.0, 3.0, 1.0, 2.0, 1.0, np.array([4.0])) == H
    Hu = hamiltonian_u_partial(co, MODEL, 2.0, 1.0, np.array([4.0]), 0.0, 3.0, 1.0)
    dtheta = co.theta_u(0.0, 3.0, 1.0, MODEL.sizes[0])
    assert float(Hu) == pytest.approx(-1.0 + 2.0 + 4.0 * dtheta * MODEL.lam[0], rel=1e-14)


def test_hamiltonian_at_paths(paths):
    co = linear_coefficients(b=(0.0, 0.0, 1.0), running="-u**2/2", terminal="x")
    adj, st = adjoint(co, paths, u=0.3, cells=(0,))
    H = hamiltonian_at(adj, co, paths, 0, state=st)
    assert np.allclose(H, -0.045 + 0.3, atol=1e-14)


def test_adjoint_csv(tmp_path, paths):
    co = linear_coefficients(sigma=(0.3, 0.0, 0.0), terminal="x")
    adj, _ = adjoint(co, paths.subset(slice(0, 3)), cells=(0,))
    adj.to_csv(tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "path_id,t,K,p,q,r_atom_0" and len(lines) == 1 + 3 * (GRID.n_cells + 1)

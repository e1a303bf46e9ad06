import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from malliavin_smp.linear import DomainError
from malliavin_smp.noise import LevyModel, TimeGrid, generate_paths
from malliavin_smp.sde import (AdmissibilityError, Control, FiltrationSpec, SimulationError, closed_form_linear,
                               linear_coefficients, performance, simulate_state, stochastic_exponential_G,
                               variational_process)

JUMPY = LevyModel.single_atom(0.5, 2.0)


@pytest.fixture(scope="module")
def paths():
    return generate_paths(JUMPY, TimeGrid.uniform(1.0, 200), 2000, 1)


def test_no_dynamics_keeps_initial_state(paths):
    X = simulate_state(linear_coefficients(), Control.constant(0.3), paths, 1.7).X
    assert np.all(X == 1.7)


def test_unit_drift_reaches_one(paths):
    st_ = simulate_state(linear_coefficients(b=(1.0, 0.0, 0.0)), Control.constant(0.0), paths, 0.0)
    assert np.allclose(st_.XT, 1.0, atol=1e-12)


def test_geometric_euler_close_to_closed_form():
    P = generate_paths(JUMPY, TimeGrid.uniform(1.0, 1000), 10_000, 2)
    co = linear_coefficients(b=(0.0, 0.1, 0.0), sigma=(0.0, 0.3, 0.0), theta=(0.0, 0.2, 0.0))
    e = simulate_state(co, Control.constant(0.0), P, 1.0).XT
    x = closed_form_linear(co, Control.constant(0.0), P, 1.0).XT
    assert np.mean(np.abs(e - x) / np.abs(x)) < 0.02


def test_closed_form_examples(paths):
    g, t = paths.grid, paths.grid.t
    X = closed_form_linear(linear_coefficients(b=(0.0, 0.4, 0.0)), Control.constant(0.0), paths, 2.0).X
    assert np.allclose(X, 2.0 * np.exp(0.4 * t), rtol=1e-12)
    X = closed_form_linear(linear_coefficients(sigma=(0.0, 0.3, 0.0)), Control.constant(0.0), paths, 1.0).X
    assert np.allclose(X, np.exp(0.3 * paths.B - 0.045 * t), rtol=1e-10)
    P = generate_paths(LevyModel.single_atom(1.0, 2.0, brownian=False), g, 200, 3)
    X = closed_form_linear(linear_coefficients(theta=(0.0, 0.5, 0.0)), Control.constant(0.0), P, 1.0).X
    Nt = np.concatenate([np.zeros((200, 1)), np.cumsum(P.counts[:, :, 0], axis=1)], axis=1)
    assert np.allclose(X, 1.5**Nt * np.exp(-0.5 * 2.0 * t), rtol=1e-10)


def test_closed_form_rejects_nonpositive_jump_factor(paths):
    with pytest.raises(DomainError):
        closed_form_linear(linear_coefficients(theta=(0.0, -1.5, 0.0)), Control.constant(0.0), paths, 1.0)


def test_euler_strong_error_shrinks_with_dt():
    m = LevyModel()
    co = linear_coefficients(b=(0.0, 0.1, 0.0), sigma=(0.0, 0.5, 0.0))
    errs = []
    for N in (50, 100, 200):
        P = generate_paths(m, TimeGrid.uniform(1.0, N), 4000, 5)
        e = simulate_state(co, Control.constant(0.0), P, 1.0).XT
        x = closed_form_linear(co, Control.constant(0.0), P, 1.0).XT
        errs.append(np.mean(np.abs(e - x)))
    assert errs[0] > errs[1] > errs[2]
    assert np.log2(errs[0] / errs[2]) / 2 >= 0.5


def test_variational_zero_direction(paths):
    co = linear_coefficients(b=(0.1, 0.2, 1.0), sigma=(0.2, 0.3, 0.5), theta=(0.1, 0.2, 0.3))
    ctl = Control.constant(0.5)
    st_ = simulate_state(co, ctl, paths, 1.0)
    assert np.all(variational_process(co, ctl, Control.constant(0.0), paths, st_).X == 0.0)


def test_variational_x_independent_coefficients(paths):
    co = linear_coefficients(b=(0.0, 0.0, 0.7), sigma=(0.0, 0.0, 0.4), theta=(0.0, 0.0, 0.3))
    ctl = Control.constant(0.0)
    st_ = simulate_state(co, ctl, paths, 1.0)
    Y = variational_process(co, ctl, Control.constant(1.0), paths, st_).X
    ref = 0.7 * paths.grid.t + 0.4 * paths.B + 0.3 * paths.eta / 0.5
    assert np.allclose(Y, ref, atol=1e-12)


@pytest.mark.parametrize("scheme", ["euler", "exact"])
def test_variational_matches_crn_difference(scheme):
    P = generate_paths(JUMPY, TimeGrid.uniform(1.0, 1000), 1000, 4)
    co = linear_coefficients(b=(0.1, 0.2, 1.0), sigma=(0.2, 0.3, 0.5), theta=(0.1, 0.2, 0.3))
    st_ = simulate_state(co, Control.constant(0.5), P, 1.0, scheme)
    Y = variational_process(co, Control.constant(0.5), Control.constant(1.0), P, st_).XT
    eps = 1e-4
    fd = (simulate_state(co, Control.constant(0.5 + eps), P, 1.0, scheme).XT - st_.XT) / eps
    assert np.mean(np.abs(fd - Y)) / np.mean(np.abs(Y)) < 0.01


def test_G_examples_and_flow(paths):
    co = linear_coefficients(b=(0.0, 0.3, 0.0))
    st_ = simulate_state(co, Control.constant(0.0), paths, 1.0)
    G = stochastic_exponential_G(co, Control.constant(0.0), paths, st_)
    t = paths.grid.t
    assert np.allclose(G(20, 150), np.exp(0.3 * (t[150] - t[20])), rtol=1e-12)
    co = linear_coefficients(b=(0.1, 0.2, 0.0), sigma=(0.0, 0.3, 0.0), theta=(0.0, 0.4, 0.0))
    st_ = simulate_state(co, Control.constant(0.0), paths, 1.0)
    G = stochastic_exponential_G(co, Control.constant(0.0), paths, st_)
    for k in (0, 50, 200):
        assert np.all(G(k, k) == 1.0)
    lhs, rhs = G(10, 190), G(10, 77) * G(77, 190)
    assert np.max(np.abs(lhs - rhs) / lhs) <= 1e-10


def test_G_domain_error(paths):
    co = linear_coefficients(theta=(0.0, -1.0, 0.0))
    st_ = simulate_state(co, Control.constant(0.0), paths, 1.0)
    with pytest.raises(DomainError):
        stochastic_exponential_G(co, Control.constant(0.0), paths, st_)


def test_performance_trivial_cases(paths):
    assert performance(linear_coefficients(terminal="x"), Control.constant(0.0),
                       generate_paths(LevyModel((), (), brownian=False), paths.grid, 3, 0), 0.8).value == pytest.approx(0.8, rel=1e-15)
    assert performance(linear_coefficients(running="1"), Control.constant(0.0), paths, 0.0).value == pytest.approx(1.0)


def test_martingale_mean(paths):
    co = linear_coefficients(sigma=(0.2, 0.3, 0.0), theta=(0.1, 0.4, 0.0), terminal="x")
    e = performance(co, Control.constant(0.0), paths, 1.0)
    assert abs(e.value - 1.0) < 3 * e.stderr


def test_dividend_performance_matches_quadrature(paths):
    # dX = (0.1 + 0.2 X - c) dt + ..., log utility, J = log(c) T + E[X(T)]
    c = 0.4
    co = linear_coefficients(b=(0.1, 0.2, -1.0), sigma=(0.2, 0.1, 0.0), theta=(0.1, 0.0, 0.0),
                             running="log(u)", terminal="x")
    e = performance(co, Control.constant(c), paths, 1.0)
    mean_XT = (1.0 + (0.1 - c) / 0.2) * np.exp(0.2) - (0.1 - c) / 0.2
    assert abs(e.value - (np.log(c) + mean_XT)) < 3 * e.stderr + 1e-3


def test_admissibility_rejection_names_path_and_time(paths):
    with pytest.raises(AdmissibilityError) as exc:
        simulate_state(linear_coefficients(), Control.constant(-1.0, bounds=(0.0, np.inf)), paths, 1.0)
    assert exc.value.path_id == int(paths.path_ids[0])


def test_non_finite_state_aborts(paths):
    co = linear_coefficients(b=(0.0, 1e308, 0.0))
    with pytest.raises(SimulationError) as exc, np.errstate(over="ignore"):
        simulate_state(co, Control.constant(0.0), paths, 1e10)
    assert "simulate_state" in str(exc.value) and exc.value.path_id >= 0


def test_filtration_delay_uses_earlier_observation(paths):
    f = FiltrationSpec(delay=0.1, features=("B",), degree=1)
    k = 100
    j = paths.grid.index_at_or_before(paths.grid.t[k] - 0.1)
    assert np.array_equal(f.observables(paths, k)[0], paths.B[:, j])
    with pytest.raises(ValueError):
        FiltrationSpec(features=("Z",))


@settings(max_examples=20, deadline=None)
@given(x0=st.floats(-5, 5), b0=st.floats(-1, 1), s0=st.floats(-1, 1))
def test_additive_noise_state_is_explicit(x0, b0, s0):
    P = generate_paths(LevyModel(), TimeGrid.uniform(1.0, 20), 5, 0)
    X = simulate_state(linear_coefficients(b=(b0, 0.0, 0.0), sigma=(s0, 0.0, 0.0)), Control.constant(0.0), P, x0).X
    assert np.allclose(X, x0 + b0 * P.grid.t + s0 * P.B, atol=1e-12)

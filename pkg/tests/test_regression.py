import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from malliavin_smp.regression import (NormalEquations, RankWarning, conditional_expectation, fit,
                                      polynomial_features, raw_monomials, zero_test)


def test_recovers_quadratic_target_exactly():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=500), rng.normal(size=500)
    target = 1.0 + 2.0 * x - 0.5 * x * y + 0.3 * y**2
    assert np.allclose(conditional_expectation(target, [x, y], 2), target, atol=1e-10)


def test_conditional_mean_of_noise_is_projection():
    rng = np.random.default_rng(1)
    x = rng.normal(size=200_000)
    h = x + rng.normal(size=x.size)
    assert np.max(np.abs(conditional_expectation(h, [x], 2) - x)) < 0.05


def test_rank_deficiency_warns_and_reduces():
    x = np.linspace(-1, 1, 50)
    X = np.column_stack([np.ones(50), x, 2 * x])
    with pytest.warns(RankWarning):
        f = fit(3 * x, X)
    assert f.reduced and f.columns.size == 2
    assert np.allclose(f.fitted, 3 * x)


def test_constant_feature_is_dropped():
    X = polynomial_features([np.zeros(10), np.arange(10.0)], 2)
    assert X.shape == (10, 3)


def test_zero_test_exact_cases():
    rng = np.random.default_rng(2)
    x = rng.normal(size=1000)
    X = polynomial_features([x], 2)
    assert zero_test(np.zeros(1000), X).z == 0.0
    assert zero_test(0.4 + 0 * x, X).z == np.inf


def test_zero_test_detects_shift_and_accepts_noise():
    rng = np.random.default_rng(3)
    n = 20_000
    x = rng.normal(size=n)
    X = polynomial_features([x], 2)
    zs = [zero_test(rng.normal(size=n), X).z for _ in range(20)]
    assert np.mean(np.array(zs) < 3.0) >= 0.9
    assert zero_test(0.1 * x + rng.normal(size=n), X).z > 5.0


def test_streaming_normal_equations_match_batch():
    rng = np.random.default_rng(4)
    x = rng.normal(size=3000)
    y = 1 + x - x**2 + 0.1 * rng.normal(size=3000)
    X = raw_monomials([x], 2)
    ne = NormalEquations(3)
    for s in range(0, 3000, 700):
        ne.add(X[s:s + 700], y[s:s + 700])
    coef = ne.solve()[:, 0]
    ref, *_ = np.linalg.lstsq(X, y, rcond=None)
    assert np.allclose(coef, ref, rtol=1e-9)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), c=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_projection_is_idempotent(a, b, c, seed):
    x = np.random.default_rng(seed).normal(size=300)
    y = a + b * x + c * x**2
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankWarning)
        once = conditional_expectation(y, [x], 2)
        twice = conditional_expectation(once, [x], 2)
    assert np.allclose(once, twice, atol=1e-9 * (1 + abs(a) + abs(b) + abs(c)))

import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from storydiffuse.nncore import Rng
from storydiffuse.nncore.layers import ConfigError
from storydiffuse.schedule import (
    forward_noise,
    inference_timesteps,
    make_schedule,
    posterior_coefficients,
    posterior_mean,
    posterior_variance,
    sample_timestep_subset,
)


def bayes_posterior_mean(x0, xt, ab_prev, alpha_t):
    """Complete the square on N(x; sqrt(ab_prev) x0, 1 - ab_prev) * N(xt; sqrt(alpha_t) x, 1 - alpha_t)."""
    prior_var = 1.0 - ab_prev
    lik_var = 1.0 - alpha_t
    prec = 1.0 / prior_var + alpha_t / lik_var
    return (math.sqrt(ab_prev) * x0 / prior_var + math.sqrt(alpha_t) * xt / lik_var) / prec


def test_single_step_schedule():
    s = make_schedule(1, "linear", 0.5, 0.5)
    np.testing.assert_array_equal(s.alpha_bar, [0.5])


def test_linear_default_reaches_near_zero_by_direct_product():
    s = make_schedule()
    assert s.T == 1000
    prod = 1.0
    for b in np.linspace(1e-4, 0.02, 1000):
        prod *= 1.0 - b
    assert prod < 1e-4
    assert s.alpha_bar[-1] == pytest.approx(prod, rel=1e-12)


@pytest.mark.parametrize("kind", ["linear", "sqrt"])
def test_schedule_invariants(kind):
    s = make_schedule(1000, kind)
    assert np.all((s.beta > 0) & (s.beta < 1))
    assert np.all(np.diff(s.alpha_bar) < 0)
    np.testing.assert_array_equal(s.alpha_bar[1:], s.alpha_bar[:-1] * s.alpha[1:])


@pytest.mark.parametrize("args", [(0, "linear", 1e-4, 0.02), (10, "linear", 0.0, 0.02), (10, "linear", 0.1, 0.05),
                                  (10, "linear", 1e-4, 1.0), (10, "cosine", 1e-4, 0.02)])
def test_bad_schedule_is_config_error(args):
    with pytest.raises(ConfigError):
        make_schedule(*args)


@pytest.mark.parametrize("t", [10, 500, 999])
def test_forward_noise_moments(t):
    s = make_schedule()
    x0 = np.full(100_000, 0.7)
    xt, _ = forward_noise(x0, t, s, Rng(t).child("mc"))
    ab = s.alpha_bar[t - 1]
    mean, var = math.sqrt(ab) * 0.7, 1.0 - ab
    assert abs(xt.var() - var) / var < 0.01
    # relative tolerance on the mean, guarded for means near zero by the std error scale
    assert abs(xt.mean() - mean) < max(0.01 * abs(mean), 5 * math.sqrt(var / 1e5))


def test_forward_noise_deterministic_branch_and_limit():
    s = make_schedule()
    x0 = np.random.default_rng(0).normal(size=(4, 3))
    xt, _ = forward_noise(x0, 7, s, eps=np.zeros_like(x0))
    np.testing.assert_array_equal(xt, np.sqrt(s.alpha_bar[6]) * x0)
    tiny = make_schedule(10, "linear", 1e-10, 1e-10)
    x1, _ = forward_noise(x0, 1, tiny, Rng(0))
    np.testing.assert_allclose(x1, x0, atol=1e-4)


def test_forward_noise_range_errors():
    s = make_schedule(10)
    with pytest.raises(ValueError):
        forward_noise(np.zeros(3), 0, s, Rng(0))
    with pytest.raises(ValueError):
        forward_noise(np.zeros(3), 11, s, Rng(0))


def test_forward_noise_per_row_timesteps():
    s = make_schedule()
    x0 = np.ones((3, 2))
    xt, _ = forward_noise(x0, np.array([1, 500, 1000]), s, eps=np.zeros_like(x0))
    np.testing.assert_allclose(xt[:, 0], np.sqrt(s.alpha_bar[[0, 499, 999]]))


def test_posterior_mean_hand_case():
    s = make_schedule(2, "linear", 0.1, 0.1)
    mu = posterior_mean(np.array(0.5), np.array(1.0), 2, s)
    assert float(mu) == pytest.approx(bayes_posterior_mean(1.0, 0.5, 0.9, 0.9), abs=1e-12)


def test_posterior_mean_matches_bayes_oracle_100_cases():
    rng = np.random.default_rng(123)
    for kind in ("linear", "sqrt"):
        s = make_schedule(1000, kind)
        for _ in range(50):
            t = int(rng.integers(2, 1001))
            x0, xt = rng.normal(size=2)
            got = float(posterior_mean(np.array(xt), np.array(x0), t, s))
            ref = bayes_posterior_mean(x0, xt, s.alpha_bar[t - 2], s.alpha[t - 1])
            assert abs(got - ref) < 1e-9


def test_posterior_mean_by_numerical_integration():
    s = make_schedule(50, "linear", 0.01, 0.2)
    t, x0, xt = 20, 0.3, -0.8
    ab_prev, a = s.alpha_bar[t - 2], s.alpha[t - 1]
    grid = np.linspace(-10, 10, 400_001)
    logp = -((grid - np.sqrt(ab_prev) * x0) ** 2) / (2 * (1 - ab_prev)) - (xt - np.sqrt(a) * grid) ** 2 / (2 * (1 - a))
    w = np.exp(logp - logp.max())
    ref = float((grid * w).sum() / w.sum())
    assert float(posterior_mean(np.array(xt), np.array(x0), t, s)) == pytest.approx(ref, abs=1e-7)


def test_posterior_t1_is_x0_and_no_noise_limit():
    s = make_schedule()
    c0, ct = posterior_coefficients(1, s)
    assert (float(c0), float(ct)) == (1.0, 0.0)
    assert float(posterior_variance(1, s)) == 0.0
    tiny = make_schedule(10, "linear", 1e-12, 1e-12)
    x = np.array([0.4, -1.2])
    np.testing.assert_allclose(posterior_mean(x, x, 5, tiny), x, rtol=1e-6)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-3, 3), st.integers(1, 1000))
def test_posterior_mean_linearity(xt, x0, a, t):
    s = make_schedule()
    lhs = float(posterior_mean(np.array(a * xt), np.array(a * x0), t, s))
    rhs = a * float(posterior_mean(np.array(xt), np.array(x0), t, s))
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_subset_sampling_properties():
    rng = Rng(0).child("subset")
    for _ in range(1000):
        S = sample_timestep_subset(1000, 30, rng).S
        assert len(set(S)) == 30
        assert all(0 < s <= 1000 for s in S)
        assert list(S) == sorted(S, reverse=True)
    assert sample_timestep_subset(7, 7, rng).S == (7, 6, 5, 4, 3, 2, 1)
    with pytest.raises(ValueError):
        sample_timestep_subset(10, 11, rng)


def test_subset_marginals_chi_square():
    T, k, draws = 20, 5, 10_000
    rng = Rng(1).child("subset")
    counts = np.zeros(T)
    for _ in range(draws):
        counts[np.asarray(sample_timestep_subset(T, k, rng).S) - 1] += 1
    expected = draws * k / T
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # 19 degrees of freedom; the p = 0.001 critical value is 43.82
    assert chi2 < 43.82


def test_inference_timesteps():
    assert inference_timesteps(1000, 1).S == (1000,)
    S = inference_timesteps(1000, 30).S
    assert S[0] == 1000 and S[-1] == 1 and len(set(S)) == 30
    assert list(S) == sorted(S, reverse=True)


@settings(max_examples=30)
@given(st.integers(1, 200), st.data())
def test_inference_timesteps_unique(T, data):
    steps = data.draw(st.integers(1, T))
    S = inference_timesteps(T, steps).S
    assert len(S) == steps == len(set(S))

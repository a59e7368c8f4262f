import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jumphom.environment import (
    EnvironmentPath,
    EnvironmentSpec,
    constant_profile,
    evaluate_mu,
    lambda_time_average,
    occupation_fractions,
    random_profile,
    sample_environment,
    sample_lambda,
    trig_profile,
)
from jumphom.errors import ConfigurationError, DomainError
from jumphom.evolution import fit_exponential_decay

from oracles import two_state_stationary


def test_constant_model_evaluates_to_value():
    spec = EnvironmentSpec("constant_in_time", (constant_profile(1.0),), 0.5, 1.5, seed=1)
    path = sample_environment(spec, (0.0, 10.0))
    for t in (0.0, 3.3, 10.0):
        assert evaluate_mu(path, [0.12], [0.9], t) == pytest.approx(1.0)


def test_same_seed_same_path(asymmetric_spec):
    p1 = sample_environment(asymmetric_spec, (0.0, 10.0), seed_offset=7)
    p2 = sample_environment(asymmetric_spec, (0.0, 10.0), seed_offset=7)
    assert np.array_equal(p1.jump_times, p2.jump_times)
    assert np.array_equal(p1.states, p2.states)
    p3 = sample_environment(asymmetric_spec, (0.0, 10.0), seed_offset=8)
    assert not np.array_equal(p1.jump_times, p3.jump_times)


def test_horizon_extension_keeps_prefix(asymmetric_spec):
    short = sample_environment(asymmetric_spec, (0.0, 10.0), seed_offset=3)
    long = sample_environment(asymmetric_spec, (0.0, 50.0), seed_offset=3)
    k = short.jump_times.size
    assert np.array_equal(short.jump_times, long.jump_times[:k])
    assert np.array_equal(short.states, long.states[: k + 1])


def test_occupation_matches_stationary_law(two_state_spec):
    # horizon 1e4: occupation fraction within 3 standard errors of the
    # exact stationary law of the uniform-resampling chain
    path = sample_environment(two_state_spec, (0.0, 1.0e4), seed_offset=0)
    frac = occupation_fractions(path)
    target = two_state_stationary(2)
    # effective number of independent stretches ~ rate * T
    se = 0.5 / math.sqrt(two_state_spec.switching_rate * 1.0e4)
    assert np.max(np.abs(frac - target)) < 3.0 * se


def test_evaluate_between_jumps_is_profile_value(asymmetric_spec):
    path = sample_environment(asymmetric_spec, (0.0, 20.0), seed_offset=1)
    assert path.jump_times.size > 2
    t = 0.5 * (path.jump_times[0] + path.jump_times[1])
    state = path.states[1]
    xi, eta = np.array([0.3]), np.array([0.8])
    expected = asymmetric_spec.profiles[state](xi, eta)
    assert evaluate_mu(path, xi, eta, t) == pytest.approx(float(expected))


def test_periodicity_of_mu(asymmetric_spec):
    path = sample_environment(asymmetric_spec, (0.0, 5.0), seed_offset=2)
    v1 = evaluate_mu(path, [0.3], [0.8], 2.0)
    v2 = evaluate_mu(path, [1.3], [0.8], 2.0)
    v3 = evaluate_mu(path, [0.3], [-0.2], 2.0)
    assert v1 == pytest.approx(float(v2), abs=1e-12)
    assert v1 == pytest.approx(float(v3), abs=1e-12)


def test_outside_horizon_raises(asymmetric_spec):
    path = sample_environment(asymmetric_spec, (0.0, 5.0))
    with pytest.raises(DomainError):
        evaluate_mu(path, [0.1], [0.1], 6.0)


def test_bounds_hold_everywhere(asymmetric_spec):
    rng = np.random.default_rng(9)
    for offset in range(5):
        path = sample_environment(asymmetric_spec, (0.0, 50.0), seed_offset=offset)
        xi = rng.uniform(-2, 2, size=(200_000, 1))
        eta = rng.uniform(-2, 2, size=(200_000, 1))
        t = rng.uniform(0.0, 50.0)
        vals = evaluate_mu(path, xi, eta, float(t))
        assert vals.min() >= asymmetric_spec.alpha_lo
        assert vals.max() <= asymmetric_spec.alpha_hi


def test_time_shift_semantics(asymmetric_spec):
    path = sample_environment(asymmetric_spec, (0.0, 20.0), seed_offset=4)
    shifted = path.shifted(3.0)
    xi, eta = np.array([0.4]), np.array([0.7])
    for t in (1.0, 5.5, 9.0):
        assert evaluate_mu(shifted, xi, eta, t) == pytest.approx(
            float(evaluate_mu(path, xi, eta, t + 3.0))
        )


def test_stationarity_of_window_statistics(two_state_spec):
    # statistics over [0, T] and [s, s+T] agree within Monte Carlo error
    T, s, reps = 200.0, 37.0, 60
    def window_mean(lo, hi, offset):
        path = sample_environment(two_state_spec, (lo - 1.0, hi + 1.0), offset)
        frac = 0.0
        grid = np.linspace(lo, hi, 400)
        vals = [float(evaluate_mu(path, [0.2], [0.6], t)) for t in grid]
        return np.mean(vals), np.var(vals)

    m0 = np.array([window_mean(0.0, T, r) for r in range(reps)])
    m1 = np.array([window_mean(s, s + T, 1000 + r) for r in range(reps)])
    se = np.sqrt(m0[:, 0].var(ddof=1) / reps + m1[:, 0].var(ddof=1) / reps)
    assert abs(m0[:, 0].mean() - m1[:, 0].mean()) < 3.5 * se


def test_autocorrelation_decays_at_switching_rate(two_state_spec):
    # surrogate for the mixing requirement: empirical autocorrelation of
    # mu at a fixed point decays at least as fast as exp(-rate * t)
    rate = two_state_spec.switching_rate
    dt, T = 0.05, 4000.0
    path = sample_environment(two_state_spec, (0.0, T + 1.0), seed_offset=5)
    grid = np.arange(0.0, T, dt)
    idx = np.searchsorted(path.jump_times, grid, side="right")
    vals = np.asarray(
        [0.6, 1.4]
    )[path.states[idx]]
    x = vals - vals.mean()
    n_lags = int(3.0 / dt)
    acf = np.array([np.mean(x[: x.size - k] * x[k:]) for k in range(n_lags)])
    acf /= acf[0]
    lags = np.arange(n_lags) * dt
    fitted, r2, _ = fit_exponential_decay(lags, np.abs(acf), floor=3e-2)
    assert fitted > 0.8 * rate
    assert r2 > 0.95


def test_sample_lambda_mean(product_spec):
    path, times, vals = sample_lambda(product_spec, (0.0, 5000.0), seed_offset=2)
    avg = lambda_time_average(path)
    # chain mean is 1.0; s.e. of the time average over rate-1 switching
    se = vals.std() / math.sqrt(product_spec.switching_rate * 5000.0)
    assert abs(avg - 1.0) < 3.0 * se


def test_sample_lambda_constant_exact():
    spec = EnvironmentSpec(
        "product_scalar",
        (constant_profile(1.0),),
        0.4,
        1.9,
        seed=2,
        switching_rate=1.0,
        lambda_values=(1.0,),
    )
    path, _, _ = sample_lambda(spec, (0.0, 100.0))
    assert lambda_time_average(path) == pytest.approx(1.0, abs=1e-15)


def test_sample_lambda_same_seed_identical(product_spec):
    _, t1, v1 = sample_lambda(product_spec, (0.0, 50.0), seed_offset=3)
    _, t2, v2 = sample_lambda(product_spec, (0.0, 50.0), seed_offset=3)
    assert np.array_equal(t1, t2) and np.array_equal(v1, v2)


def test_sample_lambda_wrong_model(asymmetric_spec):
    with pytest.raises(ConfigurationError):
        sample_lambda(asymmetric_spec, (0.0, 1.0))


def test_invalid_specs_rejected():
    with pytest.raises(ConfigurationError):
        EnvironmentSpec("markov_switching", (), 0.5, 1.5, seed=1)
    with pytest.raises(ConfigurationError):
        EnvironmentSpec(
            "markov_switching", (constant_profile(1.0),), -0.1, 1.5, seed=1
        )
    with pytest.raises(ConfigurationError):
        # profile escapes the band
        EnvironmentSpec(
            "markov_switching", (constant_profile(2.0),), 0.5, 1.5, seed=1
        )
    with pytest.raises(ConfigurationError):
        EnvironmentSpec(
            "product_scalar", (constant_profile(1.0),), 0.5, 1.5, seed=1
        )


def test_path_json_roundtrip(asymmetric_spec):
    path = sample_environment(asymmetric_spec, (-3.0, 12.0), seed_offset=6)
    clone = EnvironmentPath.from_dict(path.to_dict())
    assert np.array_equal(clone.jump_times, path.jump_times)
    assert np.array_equal(clone.states, path.states)
    xi, eta = np.array([0.25]), np.array([0.5])
    for t in (-2.0, 0.0, 11.5):
        assert evaluate_mu(clone, xi, eta, t) == pytest.approx(
            float(evaluate_mu(path, xi, eta, t))
        )


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), lo=st.floats(0.2, 0.9), width=st.floats(0.1, 1.5))
def test_random_profiles_respect_band(seed, lo, width):
    rng = np.random.default_rng(seed)
    hi = lo + width
    prof = random_profile(rng, lo, hi, n_terms=4, max_mode=3)
    pts = np.linspace(0.0, 1.0, 40, endpoint=False)[:, None]
    vals = prof(pts[:, None, :], pts[None, :, :])
    assert vals.min() >= lo and vals.max() <= hi
    assert prof.lower_bound() >= lo - 1e-12
    assert prof.upper_bound() <= hi + 1e-12

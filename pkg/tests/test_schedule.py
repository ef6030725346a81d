import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isorecon.schedule import NoiseSchedule, ddim_sigma, forward_perturb, make_cosine_schedule


def toy_schedule(alpha_bars):
    ab = np.asarray(alpha_bars, dtype=np.float64)
    alphas = np.ones_like(ab)
    alphas[1:] = ab[1:] / ab[:-1]
    return NoiseSchedule(T=len(ab) - 1, s=0.008, betas=1 - alphas, alphas=alphas, alpha_bars=ab)


def g(t, T=1000, s=0.008):
    return math.cos(((t / T + s) / (1 + s)) * math.pi / 2) ** 2


@pytest.fixture(scope="module")
def sched():
    return make_cosine_schedule(1000, 0.008)


def test_paper_configuration(sched):
    assert sched.T == 1000
    assert len(sched.alpha_bars) == 1001
    assert sched.alpha_bars[0] == 1.0


def test_alpha_bar_matches_closed_form(sched):
    assert abs(sched.alpha_bars[500] - g(500) / g(0)) < 1e-12


def test_invariants(sched):
    b, a, ab = sched.betas[1:], sched.alphas[1:], sched.alpha_bars
    assert np.all((b > 0) & (b < 1))
    assert b.max() <= 0.999
    assert np.array_equal(sched.alphas[1:], 1 - sched.betas[1:])
    assert np.array_equal(ab[1:], ab[:-1] * sched.alphas[1:])
    assert np.all(np.diff(ab) < 0)
    assert ab[-1] < 1e-2


@pytest.mark.parametrize("T,s", [(1, 0.008), (0, 0.008), (10, 0.0), (10, -1.0)])
def test_rejects_bad_construction(T, s):
    with pytest.raises(ValueError):
        make_cosine_schedule(T, s)


def test_params_round_trip(sched):
    again = NoiseSchedule.from_params(sched.params())
    assert np.array_equal(again.alpha_bars, sched.alpha_bars)


@settings(max_examples=30, deadline=None)
@given(T=st.integers(2, 2000), s=st.floats(1e-4, 0.2))
def test_invariants_hold_for_any_valid_schedule(T, s):
    sc = make_cosine_schedule(T, s)
    assert sc.alpha_bars[0] == 1.0
    assert np.all(np.diff(sc.alpha_bars) < 0)
    assert np.all(sc.betas[1:] < 1) and np.all(sc.betas[1:] > 0)
    assert sc.alpha_bars[-1] < 1e-2


def test_forward_perturb_zero_noise_weight(rng):
    sc = toy_schedule([1.0, 1.0, 0.25])
    x0 = rng.standard_normal((5, 7))
    assert np.array_equal(forward_perturb(x0, 1, rng.standard_normal((5, 7)), sc), x0)


def test_forward_perturb_zero_signal(rng, sched):
    eps = rng.standard_normal((4, 4))
    out = forward_perturb(np.zeros((4, 4)), 300, eps, sched)
    np.testing.assert_allclose(out, math.sqrt(1 - sched.alpha_bars[300]) * eps, rtol=0, atol=0)


def test_forward_perturb_hand_value():
    sc = toy_schedule([1.0, 1.0, 0.25])
    out = forward_perturb(np.ones((3, 3)), 2, np.ones((3, 3)), sc)
    np.testing.assert_allclose(out, 0.5 + math.sqrt(0.75), rtol=0, atol=1e-15)


def test_forward_perturb_without_noise_scales(sched, rng):
    x0 = rng.standard_normal((6, 6))
    for t in (1, 10, 500, 1000):
        assert np.array_equal(forward_perturb(x0, t, np.zeros_like(x0), sched), math.sqrt(sched.alpha_bars[t]) * x0)


def test_forward_perturb_errors(sched):
    with pytest.raises(ValueError):
        forward_perturb(np.zeros((2, 2)), 5, np.zeros((2, 3)), sched)
    for t in (0, 1001):
        with pytest.raises(ValueError):
            forward_perturb(np.zeros((2, 2)), t, np.zeros((2, 2)), sched)


def test_forward_marginal_variance(sched):
    draws = 200_000
    t = 400
    eps = np.random.default_rng(7).standard_normal(draws)
    samples = forward_perturb(np.full(draws, 0.3), t, eps, sched)
    var = samples.var(ddof=1)
    expected = 1 - sched.alpha_bars[t]
    stderr = expected * math.sqrt(2 / (draws - 1))
    assert abs(var - expected) < 3 * stderr
    assert abs(samples.mean() - math.sqrt(sched.alpha_bars[t]) * 0.3) < 3 * math.sqrt(expected / draws)


def test_ddim_sigma_examples(sched):
    for t in (1, 17, 999):
        assert ddim_sigma(sched, t, deterministic=True) == 0.0
    assert ddim_sigma(sched, 1) == 0.0
    ab_t, ab_p = g(500) / g(0), g(499) / g(0)
    direct = math.sqrt((1 - ab_p) / (1 - ab_t)) * math.sqrt(1 - ab_t / ab_p)
    assert abs(ddim_sigma(sched, 500) - direct) < 1e-12


def test_ddim_sigma_errors(sched):
    for t in (0, 1001):
        with pytest.raises(ValueError):
            ddim_sigma(sched, t)
    with pytest.raises(ValueError):
        ddim_sigma(sched, 10, t_prev=10)


def test_noise_decomposition_is_feasible(sched):
    ab = sched.alpha_bars
    for t in range(1, sched.T + 1):
        s2 = ddim_sigma(sched, t) ** 2
        assert 1 - ab[t] - s2 >= 0
        assert 1 - ab[t - 1] - s2 >= -1e-15
        assert s2 + (1 - ab[t - 1] - s2) <= 1 - ab[t - 1] + 1e-12


def test_strided_sigma_is_feasible(sched):
    for t, p in [(200, 196), (1000, 980), (50, 0)]:
        s2 = ddim_sigma(sched, t, t_prev=p) ** 2
        assert 0 <= s2 <= 1 - sched.alpha_bars[p] + 1e-15

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rangediff.diffusion import (NoiseSchedule, cfg_combine, ddim_step, ddim_timesteps,
                                 ddpm_step, forward_sample, make_linear_schedule, mu_from_eps,
                                 posterior_params, predict_x0, sigma, simple_loss)
from rangediff.errors import DimensionMismatch, InvalidRange, InvalidStepPair, InvalidStride

T2 = make_linear_schedule(2, 0.1, 0.1)


def test_schedule_examples():
    np.testing.assert_allclose(T2.alpha_bar, [0.9, 0.81], rtol=1e-15)
    np.testing.assert_allclose(make_linear_schedule(1, 0.5, 0.5).alpha_bar, [0.5])
    assert make_linear_schedule().alpha_bar[-1] < 1e-3
    tiny = make_linear_schedule(50, 1e-9, 1e-9)
    assert tiny.alpha_bar[-1] > 1 - 1e-6
    assert T2.ab(0) == 1.0


@pytest.mark.parametrize("args", [(0, 1e-4, 2e-2), (10, 0.0, 0.1), (10, 0.1, 1.0), (10, 0.2, 0.1)])
def test_schedule_rejects(args):
    with pytest.raises(InvalidRange):
        make_linear_schedule(*args)


def test_schedule_from_betas_rejects_decreasing():
    with pytest.raises(InvalidRange):
        NoiseSchedule.from_betas([0.2, 0.1])


@given(st.lists(st.floats(1e-6, 0.5), min_size=1, max_size=60))
def test_beta_tilde_bounded_by_beta(betas):
    s = NoiseSchedule.from_betas(sorted(betas))
    assert np.all(s.beta_tilde <= s.beta)
    assert s.beta_tilde[0] == 0.0


def test_forward_sample_examples():
    assert forward_sample(np.array([1.0]), 2, np.array([1.0]), T2)[0] == pytest.approx(
        0.9 + math.sqrt(0.19), abs=1e-12)
    e = np.array([0.3, -1.2])
    np.testing.assert_allclose(forward_sample(np.zeros(2), 1, e, T2), math.sqrt(0.1) * e)
    degenerate = make_linear_schedule(3, 1e-300, 1e-300)
    x0 = np.array([0.7, -2.0])
    np.testing.assert_array_equal(forward_sample(x0, 3, e, degenerate), x0)
    with pytest.raises(DimensionMismatch):
        forward_sample(np.zeros(2), 1, np.zeros(3), T2)


def test_forward_sample_per_row_steps():
    s = make_linear_schedule(100)
    rng = np.random.default_rng(0)
    x0, noise = rng.normal(size=(2, 5, 3))
    t = np.array([1, 10, 50, 99, 100])
    out = forward_sample(x0, t, noise, s)
    for i, ti in enumerate(t):
        np.testing.assert_array_equal(out[i], forward_sample(x0[i], int(ti), noise[i], s))


def test_forward_marginal_monte_carlo():
    s = make_linear_schedule(1000)
    rng = np.random.default_rng(1)
    x0, t, n = 1.7, 300, 100_000
    xt = forward_sample(np.full(n, x0), t, rng.standard_normal(n), s)
    ab = s.ab(t)
    assert abs(xt.mean() - math.sqrt(ab) * x0) < 3 * math.sqrt((1 - ab) / n)
    assert abs(xt.var() - (1 - ab)) < 3 * (1 - ab) * math.sqrt(2 / n)


def test_posterior_examples():
    x0, x2 = np.array([0.8]), np.array([-0.3])
    mean, var = posterior_params(x0, x2, 2, T2)
    # (sqrt(0.9) * 0.1 * x0 + sqrt(0.9) * 0.1 * x2) / 0.19
    assert mean[0] == pytest.approx(0.49931 * (0.8 - 0.3), abs=1e-5)
    assert var == pytest.approx(0.0526316, abs=1e-7)
    mean, var = posterior_params(x0, x2, 1, T2)
    assert mean[0] == pytest.approx(0.8, abs=1e-15) and var == 0.0
    mean, _ = posterior_params(np.zeros(3), np.zeros(3), 2, T2)
    np.testing.assert_array_equal(mean, 0.0)


def test_posterior_matches_grid_product():
    s = make_linear_schedule(2, 0.1, 0.1)
    x0, xt = 0.8, -0.3
    g = np.linspace(-8, 8, 1_600_001)
    logp = -0.5 * (xt - math.sqrt(0.9) * g) ** 2 / 0.1 - 0.5 * (g - math.sqrt(0.9) * x0) ** 2 / 0.1
    w = np.exp(logp - logp.max())
    w /= w.sum()
    m = np.sum(w * g)
    v = np.sum(w * (g - m) ** 2)
    mean, var = posterior_params(np.array([x0]), np.array([xt]), 2, s)
    assert abs(mean[0] - m) < 1e-4 and abs(var - v) < 1e-4


def test_mu_from_eps():
    s = make_linear_schedule(10)
    xt = np.array([0.4, -1.0])
    np.testing.assert_allclose(mu_from_eps(xt, np.zeros(2), 5, s), xt / math.sqrt(s.a(5)))
    tiny = make_linear_schedule(4, 1e-12, 1e-12)
    np.testing.assert_allclose(mu_from_eps(xt, np.ones(2), 3, tiny), xt, atol=1e-5)
    with pytest.raises(DimensionMismatch):
        mu_from_eps(xt, np.zeros(3), 5, s)


@given(st.integers(1, 1000), st.integers(0, 10**6))
def test_reparameterised_mean_identity(t, seed):
    s = make_linear_schedule(1000)
    rng = np.random.default_rng(seed)
    xt, eps = rng.normal(size=(2, 4))
    x0 = (xt - math.sqrt(1 - s.ab(t)) * eps) / math.sqrt(s.ab(t))
    mean, _ = posterior_params(x0, xt, t, s)
    np.testing.assert_allclose(mean, mu_from_eps(xt, eps, t, s), rtol=0, atol=1e-12)


def test_ddpm_step():
    s = make_linear_schedule(10)
    xt = np.array([1.0, 2.0])
    np.testing.assert_allclose(ddpm_step(xt, np.zeros(2), 4, np.zeros(2), s), xt / math.sqrt(s.a(4)))
    z = np.array([5.0, -5.0])
    np.testing.assert_array_equal(ddpm_step(xt, np.zeros(2), 1, z, s),
                                  ddpm_step(xt, np.zeros(2), 1, np.zeros(2), s))
    base = ddpm_step(xt, np.zeros(2), 4, np.zeros(2), s)
    np.testing.assert_allclose(ddpm_step(xt, np.zeros(2), 4, z, s, "beta") - base,
                               math.sqrt(s.b(4)) * z)
    np.testing.assert_allclose(ddpm_step(xt, np.zeros(2), 4, z, s) - base, math.sqrt(s.bt(4)) * z)
    assert sigma(4, s, "beta") > sigma(4, s, "beta_tilde")
    with pytest.raises(ValueError):
        sigma(4, s, "other")


def test_ddim_step():
    s = make_linear_schedule(100)
    rng = np.random.default_rng(2)
    x0, eps = rng.normal(size=(2, 6))
    xt = forward_sample(x0, 80, eps, s)
    np.testing.assert_allclose(ddim_step(xt, eps, 80, 0, s), predict_x0(xt, eps, 80, s))
    np.testing.assert_allclose(ddim_step(xt, eps, 80, 0, s), x0, atol=1e-12)
    # exact noise keeps the state on the forward trajectory of x0
    np.testing.assert_allclose(ddim_step(xt, eps, 80, 35, s), forward_sample(x0, 35, eps, s),
                               atol=1e-12)
    for bad in ((5, 5), (5, 7), (101, 3), (5, -1)):
        with pytest.raises(InvalidStepPair):
            ddim_step(xt, eps, bad[0], bad[1], s)


def test_cfg_combine():
    c, u = np.array([1.0, -2.0]), np.array([0.5, 0.5])
    np.testing.assert_array_equal(cfg_combine(c, u, 1.0), c)
    np.testing.assert_array_equal(cfg_combine(c, u, 0.0), u)
    assert cfg_combine(np.array([1.0]), np.array([0.0]), 5.0)[0] == 5.0
    with pytest.raises(DimensionMismatch):
        cfg_combine(c, np.zeros(3), 2.0)


def test_simple_loss():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 7, 2))
    assert simple_loss(a, a) == 0.0
    assert simple_loss(np.array([1.0, 0.0]), np.zeros(2)) == 1.0
    ref = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel()))
    assert abs(simple_loss(a, b) - ref) < 1e-12
    with pytest.raises(DimensionMismatch):
        simple_loss(a, b[:3])


def test_ddim_timesteps():
    assert ddim_timesteps(10, 10) == list(range(10, -1, -1))
    assert ddim_timesteps(200, 50)[:3] == [200, 196, 192]
    assert ddim_timesteps(200, 1) == [200, 0]
    for steps in (0, 3, 201):
        with pytest.raises(InvalidStride):
            ddim_timesteps(200, steps)

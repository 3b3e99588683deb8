import numpy as np
import pytest

from deskdiff import diffusion as df
from deskdiff.errors import ParameterError, ShapeError
from deskdiff.schedule import cosine_schedule, derive, linear_schedule


def joint_gaussian_posterior(x0, xt, t, sched):
    """Condition the joint Gaussian of (x_{t-1}, x_t) given x_0 on x_t, by explicit Schur complement."""
    abar_prev = sched.alpha_bar[t - 1]
    alpha = sched.alphas[t]
    beta = sched.betas[t]
    mu = np.array([np.sqrt(abar_prev) * x0, np.sqrt(alpha * abar_prev) * x0])
    v_prev = 1.0 - abar_prev
    cov = np.array([[v_prev, np.sqrt(alpha) * v_prev], [np.sqrt(alpha) * v_prev, alpha * v_prev + beta]])
    gain = cov[0, 1] / cov[1, 1]
    return mu[0] + gain * (xt - mu[1]), cov[0, 0] - gain * cov[1, 0]


def test_q_sample_noiseless(rng):
    s = cosine_schedule(50)
    x0 = rng.standard_normal((3, 4))
    np.testing.assert_allclose(df.q_sample(x0, 20, np.zeros_like(x0), s), np.sqrt(s.alpha_bar[20]) * x0)


def test_q_sample_variance_monte_carlo():
    s = cosine_schedule(50)
    r = np.random.default_rng(1)
    n = 100_000
    xt = df.q_sample(np.zeros(n), 30, r.standard_normal(n), s)
    target = 1 - s.alpha_bar[30]
    se = target * np.sqrt(2.0 / (n - 1))
    assert abs(xt.var(ddof=1) - target) < 3 * se


def test_q_sample_rejects_bad_t_and_shape(rng):
    s = cosine_schedule(10)
    with pytest.raises(ParameterError):
        df.q_sample(np.zeros(3), 0, np.zeros(3), s)
    with pytest.raises(ShapeError):
        df.q_sample(np.zeros(3), 1, np.zeros(4), s)


def test_per_row_timesteps(rng):
    s = cosine_schedule(20)
    x0 = rng.standard_normal((3, 2))
    eps = rng.standard_normal((3, 2))
    t = np.array([1, 7, 20])
    batched = df.q_sample(x0, t, eps, s)
    for i in range(3):
        np.testing.assert_allclose(batched[i], df.q_sample(x0[i : i + 1], int(t[i]), eps[i : i + 1], s)[0])


@pytest.mark.parametrize("t", [1, 2, 3, 4, 5])
def test_posterior_matches_joint_gaussian(f64, rng, t):
    s = linear_schedule(5, 0.05, 0.4)
    x0, xt = rng.standard_normal(2)
    q = df.posterior(np.array([x0]), np.array([xt]), t, s)
    mean, var = joint_gaussian_posterior(x0, xt, t, s)
    assert abs(q.mean[0] - mean) < 1e-10
    assert abs(q.variance[0] - var) < 1e-10


def test_posterior_t1_deterministic():
    s = linear_schedule(5, 0.05, 0.4)
    x0 = np.array([0.3, -0.7])
    q = df.posterior(x0, np.sqrt(s.alphas[1]) * x0, 1, s)
    np.testing.assert_allclose(q.variance, 0.0)
    np.testing.assert_allclose(q.mean, x0, atol=1e-12)


def test_posterior_coefficients_small_beta_limit():
    s = derive(np.array([0.1, 1e-8]))
    one = np.ones(1)
    c0 = df.posterior(one, 0 * one, 2, s).mean[0]
    ct = df.posterior(0 * one, one, 2, s).mean[0]
    assert abs(c0 + ct - 1.0) < 1e-7


def test_mean_from_true_eps_equals_posterior_mean(f64, rng):
    s = cosine_schedule(100)
    x0 = rng.standard_normal((4, 3))
    eps = rng.standard_normal((4, 3))
    for t in (2, 37, 100):
        xt = df.q_sample(x0, t, eps, s)
        np.testing.assert_allclose(df.mean_from_eps(xt, t, eps, s), df.posterior(x0, xt, t, s).mean, atol=1e-10)


def test_mean_from_zero_eps(rng):
    s = cosine_schedule(30)
    x = rng.standard_normal(5)
    np.testing.assert_allclose(df.mean_from_eps(x, 9, np.zeros(5), s), x / np.sqrt(s.alphas[9]))


def test_mean_from_eps_affine_identity(f64, rng):
    s = cosine_schedule(30)
    x, e1, e2 = rng.standard_normal((3, 6))
    a, b, t = 0.7, -1.9, 12
    lhs = df.mean_from_eps(x, t, a * e1 + b * e2, s)
    rhs = a * df.mean_from_eps(x, t, e1, s) + b * df.mean_from_eps(x, t, e2, s) - (a + b - 1) * x / np.sqrt(s.alphas[t])
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_predict_x0_inverts_q_sample(f64, rng):
    s = cosine_schedule(100)
    x0 = rng.standard_normal((3, 2, 4, 4))
    eps = rng.standard_normal(x0.shape)
    t = np.array([1, 50, 99])
    xt = df.q_sample(x0, t, eps, s)
    np.testing.assert_allclose(df.predict_x0(xt, t, eps, s), x0, atol=1e-10)


def test_predict_x0_zero_eps(rng):
    s = cosine_schedule(100)
    x = rng.standard_normal(3)
    np.testing.assert_allclose(df.predict_x0(x, 40, np.zeros(3), s), x / np.sqrt(s.alpha_bar[40]))


def test_predict_x0_scalar_oracle(f64):
    import math

    T, t, offset = 100, 37, 0.008

    def f(k):
        return math.cos((k / T + offset) / (1 + offset) * math.pi / 2) ** 2

    abar = 1.0
    for k in range(1, t + 1):
        abar *= 1.0 - min(1.0 - (f(k) / f(0)) / (f(k - 1) / f(0)), 0.999)
    xt, e = 0.42, -1.3
    expected = xt / math.sqrt(abar) - math.sqrt(1 / abar - 1) * e
    got = df.predict_x0(np.array([xt]), t, np.array([e]), cosine_schedule(T))[0]
    assert abs(got - expected) < 1e-10


def test_eps_from_x0_inverts_predict_x0(f64, rng):
    s = cosine_schedule(50)
    xt, eps = rng.standard_normal((2, 8))
    np.testing.assert_allclose(df.eps_from_x0(xt, 17, df.predict_x0(xt, 17, eps, s), s), eps, atol=1e-10)


def test_chain_matches_marginal_monte_carlo():
    s = linear_schedule(10, 0.02, 0.3)
    r = np.random.default_rng(3)
    n, x0 = 100_000, 0.8
    x = np.full(n, x0)
    for t in range(1, 11):
        x = df.q_step(x, t, r.standard_normal(n), s)
    mean_t = np.sqrt(s.alpha_bar[10]) * x0
    var_t = 1 - s.alpha_bar[10]
    assert abs(x.mean() - mean_t) < 3 * np.sqrt(var_t / n)
    assert abs(x.var(ddof=1) - var_t) < 3 * var_t * np.sqrt(2 / (n - 1))

import numpy as np
import pytest
from scipy import integrate, stats

from deskdiff import diffusion as df
from deskdiff import losses
from deskdiff.autodiff import ops
from deskdiff.autodiff.tensor import Tensor, grad_of
from deskdiff.data import quantize
from deskdiff.errors import DomainError
from deskdiff.schedule import cosine_schedule, default_linear_schedule, linear_schedule


def kl_by_quadrature(m1, v1, m2, v2):
    p = stats.norm(m1, np.sqrt(v1))
    q = stats.norm(m2, np.sqrt(v2))
    lo, hi = m1 - 12 * np.sqrt(v1), m1 + 12 * np.sqrt(v1)
    val, _ = integrate.quad(lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x)), lo, hi, epsabs=1e-13, epsrel=1e-12, limit=200)
    return val


class FixedModel:
    """Returns preset (eps, v) regardless of input."""

    def __init__(self, eps, v):
        self.eps, self.v = eps, v

    def __call__(self, xt, t, cond, **kw):
        return Tensor(self.eps), Tensor(self.v)


class TestKL:
    def test_identical_is_zero(self):
        assert losses.gaussian_kl(np.array(0.3), np.array(2.0), np.array(0.3), np.array(2.0)) == 0.0

    def test_unit_shift(self, f64):
        assert losses.gaussian_kl(np.array(0.0), np.array(1.0), np.array(1.0), np.array(1.0)) == pytest.approx(0.5, abs=1e-12)
        assert kl_by_quadrature(0, 1, 1, 1) == pytest.approx(0.5, abs=1e-9)

    def test_variance_ratio(self, f64):
        expected = 0.5 * (4 - 1 - np.log(4))
        assert expected == pytest.approx(0.806853, abs=1e-6)
        assert losses.gaussian_kl(np.array(0.0), np.array(4.0), np.array(0.0), np.array(1.0)) == pytest.approx(expected, abs=1e-12)
        assert kl_by_quadrature(0, 4, 0, 1) == pytest.approx(expected, abs=1e-9)

    def test_random_pairs_vs_quadrature(self, f64):
        r = np.random.default_rng(7)
        for _ in range(20):
            m1, m2 = r.normal(0, 1.5, 2)
            v1, v2 = r.uniform(0.2, 3.0, 2)
            closed = losses.gaussian_kl(np.array(m1), np.array(v1), np.array(m2), np.array(v2))
            assert abs(closed - kl_by_quadrature(m1, v1, m2, v2)) < 1e-6

    def test_batch_reduction(self, f64):
        # per row: sum over two dims; then batch mean
        m1 = np.array([[0.0, 0.0], [1.0, 0.0]])
        one = np.ones_like(m1)
        assert losses.gaussian_kl(m1, one, np.zeros_like(m1), one) == pytest.approx(0.25)

    def test_nonpositive_variance(self):
        with pytest.raises(DomainError):
            losses.gaussian_kl(np.zeros(2), np.array([1.0, 0.0]), np.zeros(2), np.ones(2))


class TestDiscretized:
    def test_point_mass_at_bin_centre(self, f64):
        x = quantize(np.array([[-1.0, 0.2, 1.0]]))
        assert abs(losses.discretized_gaussian_loglik(x, x, np.full_like(x, 1e-12))) < 1e-9

    def test_open_lower_tail_is_finite(self, f64):
        ll = losses.discretized_gaussian_loglik(np.array([[-1.0]]), np.array([[10.0]]), np.array([[1.0]]))
        assert np.isfinite(ll)
        assert ll == pytest.approx(stats.norm.logcdf(-1 + 1 / 255.0, loc=10.0), rel=1e-9)

    @pytest.mark.parametrize("mean,var", [(0.0, 0.1), (0.93, 1e-4), (-1.4, 2.0), (0.3, 1e-7)])
    def test_bins_sum_to_one(self, f64, mean, var):
        grid = np.arange(256) / 127.5 - 1.0
        ll = losses.discretized_gaussian_log_likelihood(grid, np.full(256, mean), np.full(256, np.log(var))).data
        assert abs(np.exp(ll).sum() - 1.0) < 1e-9

    def test_gradients_fd(self, f64, rng):
        from deskdiff.autodiff.gradcheck import grad_check

        x = np.rint((rng.uniform(-1, 1, (2, 5)) + 1) * 127.5) / 127.5 - 1
        x[0, 0], x[1, 1] = -1.0, 1.0
        lv = np.log(rng.uniform(1e-3, 0.05, (2, 5)))
        mu0 = x + rng.normal(0, 0.05, x.shape)
        assert grad_check(lambda m: ops.sum(losses.discretized_gaussian_log_likelihood(x, m, lv)), mu0, 1e-5, 4) < 1e-4
        assert grad_check(lambda s: ops.sum(losses.discretized_gaussian_log_likelihood(x, mu0, s)), lv, 1e-5, 4) < 1e-4


class TestVariance:
    def test_endpoints(self):
        s = cosine_schedule(20)
        assert losses.sigma_from_v(np.ones(1), 5, s)[0] == pytest.approx(s.betas[5])
        assert losses.sigma_from_v(np.zeros(1), 5, s)[0] == pytest.approx(s.beta_tilde[5])

    def test_half_hand_value(self):
        s = linear_schedule(2, 0.1, 0.2)
        assert losses.sigma_from_v(np.array([0.5]), 2, s)[0] == pytest.approx(0.119523, abs=1e-6)

    def test_t1_floor(self):
        s = cosine_schedule(20)
        assert losses.sigma_from_v(np.zeros(1), 1, s)[0] == pytest.approx(1e-8)


class TestObjectives:
    def setup_method(self):
        self.s = cosine_schedule(50)
        r = np.random.default_rng(0)
        self.x0 = np.rint((r.uniform(-1, 1, (4, 3)) + 1) * 127.5) / 127.5 - 1
        self.eps = r.standard_normal((4, 3))
        self.t = np.array([1, 2, 30, 50])

    def test_l_simple_perfect_and_offset(self, f64):
        assert float(losses.l_simple(FixedModel(self.eps, 0.5 * np.ones_like(self.eps)), self.x0, self.t, self.eps, None, self.s).data) == 0.0
        shifted = FixedModel(self.eps + 0.3, 0.5 * np.ones_like(self.eps))
        assert float(losses.l_simple(shifted, self.x0, self.t, self.eps, None, self.s).data) == pytest.approx(0.09)

    def test_l_simple_scalar_loop(self, f64, rng):
        pred = rng.standard_normal(self.eps.shape)
        got = float(losses.l_simple(FixedModel(pred, pred), self.x0, self.t, self.eps, None, self.s).data)
        acc = 0.0
        for i in range(4):
            for j in range(3):
                acc += (pred[i, j] - self.eps[i, j]) ** 2
        assert abs(got - acc / 12) < 1e-10

    def test_lambda_zero(self, f64, rng):
        m = FixedModel(rng.standard_normal(self.eps.shape), rng.uniform(0, 1, self.eps.shape))
        parts = losses.l_hybrid(m, self.x0, self.t, self.eps, None, self.s, lam=0.0)
        assert float(parts.total.data) == float(parts.l_simple.data)

    def test_perfect_model_zero_vlb(self, f64):
        t = np.array([2, 10, 30, 50])
        parts = losses.l_hybrid(FixedModel(self.eps, np.zeros_like(self.eps)), self.x0, t, self.eps, None, self.s)
        assert abs(float(parts.l_vlb_term.data)) < 1e-10
        assert float(parts.total.data) == pytest.approx(float(parts.l_simple.data) + 0.001 * float(parts.l_vlb_term.data))

    def test_vlb_terms_nonnegative(self, f64, rng):
        for _ in range(5):
            m = FixedModel(rng.standard_normal(self.eps.shape), rng.uniform(0, 1, self.eps.shape))
            xt = df.q_sample(self.x0, self.t, self.eps, self.s)
            for idx, rows in losses.vlb_terms(self.x0, xt, self.t, Tensor(m.eps), Tensor(m.v), self.s):
                assert np.all(rows.data >= -1e-12)

    def test_stop_gradient_contract(self, f64, rng):
        """The noise head gets the same gradient from L_hybrid as from L_simple; the VLB term feeds only v."""
        we = Tensor(rng.standard_normal(3), requires_grad=True)
        wv = Tensor(rng.standard_normal(3), requires_grad=True)

        def model(xt, t, cond, **kw):
            return ops.mul(Tensor(xt), we), ops.sigmoid(ops.mul(Tensor(xt), wv))

        hybrid = losses.l_hybrid(model, self.x0, self.t, self.eps, None, self.s, lam=0.5)
        hybrid.total.backward()
        g_we_total, g_wv_total = grad_of(we).copy(), grad_of(wv).copy()
        we.grad = wv.grad = None
        losses.l_simple(model, self.x0, self.t, self.eps, None, self.s).backward()
        np.testing.assert_allclose(g_we_total, grad_of(we), atol=1e-14)
        assert np.abs(g_wv_total).max() > 0

        # finite differences of the VLB value w.r.t. the noise head are nonzero,
        # yet the backpropagated VLB gradient into that head is zero
        we.grad = wv.grad = None
        hybrid.l_vlb_term.backward()
        np.testing.assert_array_equal(grad_of(we), 0.0)
        base = float(hybrid.l_vlb_term.data)
        we.data[0] += 1e-3
        moved = float(losses.l_hybrid(model, self.x0, self.t, self.eps, None, self.s, lam=0.5).l_vlb_term.data)
        assert moved != base

    def test_prior_term_small_at_T1000(self, f64):
        x0 = np.linspace(-1, 1, 11)
        assert losses.prior_kl(x0, cosine_schedule(1000)) < 1e-3
        assert losses.prior_kl(x0, default_linear_schedule(1000)) < 1e-3

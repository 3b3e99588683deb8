"""Training objectives: noise MSE, variational-bound terms and their hybrid.

Reductions: ``l_simple`` averages over every element. Bound terms are summed
over the non-batch axes and averaged over the batch, in nats.
"""

from dataclasses import dataclass

import numpy as np
from scipy import special

from . import diffusion
from .autodiff import ops
from .autodiff.tensor import Tensor, as_tensor, make_node, stop_gradient
from .errors import DomainError
from .schedule import NoiseSchedule

# half-width of one 8-bit level after mapping [0, 255] onto [-1, 1]
HALF_BIN = 1.0 / 255.0
_LOG_SQRT_2PI = 0.9189385332046727


@dataclass
class HybridLossParts:
    l_simple: Tensor
    l_vlb_term: Tensor
    lam: float
    total: Tensor

    def as_floats(self):
        return {
            "l_simple": float(self.l_simple.data),
            "l_vlb": float(self.l_vlb_term.data),
            "total": float(self.total.data),
        }


def _reduce_rows(x):
    """Sum over non-batch axes, then mean over the batch."""
    x = as_tensor(x)
    if x.ndim == 1:
        return ops.mean(x)
    return ops.mean(ops.sum(x, axis=tuple(range(1, x.ndim))))


# ------------------------------------------------------------------------ KL


def normal_kl(mean1, logvar1, mean2, logvar2):
    """Elementwise KL(N(mean1, e^logvar1) || N(mean2, e^logvar2)); Tensor-aware."""
    mean1, logvar1, mean2, logvar2 = (as_tensor(a) for a in (mean1, logvar1, mean2, logvar2))
    d = ops.sub(mean1, mean2)
    inner = ops.add(ops.exp(ops.sub(logvar1, logvar2)), ops.mul(ops.mul(d, d), ops.exp(ops.neg(logvar2))))
    return ops.scale(ops.add(ops.sub(ops.sub(logvar2, logvar1), 1.0), inner), 0.5)


def gaussian_kl(mean1, var1, mean2, var2):
    """KL between diagonal Gaussians given by variances, reduced per batch convention."""
    var1 = np.asarray(var1, dtype=np.float64)
    var2 = np.asarray(var2, dtype=np.float64)
    if np.any(var1 <= 0) or np.any(var2 <= 0):
        raise DomainError("gaussian_kl requires strictly positive variances")
    kl = normal_kl(mean1, np.log(var1), mean2, np.log(var2))
    if kl.ndim == 0:
        return float(kl.data)
    return float(_reduce_rows(kl).data)


# ------------------------------------------------------- discretised decoder


def _log_pdf(z):
    return -0.5 * z * z - _LOG_SQRT_2PI


def _log_diff(a, b):
    """log(e^a - e^b) for a > b."""
    return a + np.log(-np.expm1(b - a))


def discretized_gaussian_log_likelihood(x, mean, log_var):
    """Per-element log mass of N(mean, e^log_var) over each pixel's 8-bit bin.

    ``x`` is a constant array in [-1, 1]; ``mean`` and ``log_var`` may be
    Tensors (gradients flow to both). Bins at the extremes are open-ended.
    """
    mean, log_var = as_tensor(mean), as_tensor(log_var)
    x = np.asarray(x, dtype=np.float64)
    mu = mean.data.astype(np.float64)
    s = log_var.data.astype(np.float64)
    sigma = np.exp(0.5 * s)
    u = (x - mu + HALF_BIN) / sigma
    lo = (x - mu - HALF_BIN) / sigma

    low_edge = x < -0.999
    high_edge = x > 0.999
    both_pos = lo > 0
    # interior mass, computed on the tail that keeps precision
    with np.errstate(divide="ignore", invalid="ignore"):
        log_mid = np.where(
            both_pos,
            _log_diff(special.log_ndtr(-lo), special.log_ndtr(-u)),
            _log_diff(special.log_ndtr(u), special.log_ndtr(lo)),
        )
    log_low = special.log_ndtr(u)
    log_high = special.log_ndtr(-lo)
    logp = np.where(low_edge, log_low, np.where(high_edge, log_high, log_mid))

    # d logp / du and d logp / dl
    with np.errstate(over="ignore", invalid="ignore"):
        a_u = np.where(high_edge, 0.0, np.exp(_log_pdf(u) - np.where(low_edge, log_low, log_mid)))
        a_l = np.where(low_edge, 0.0, np.exp(_log_pdf(lo) - np.where(high_edge, log_high, log_mid)))

    def backward(g):
        g = g.astype(np.float64)
        gmean = -g * (a_u - a_l) / sigma
        glogvar = -0.5 * g * (a_u * u - a_l * lo)
        return gmean, glogvar

    return make_node(logp, (mean, log_var), backward, "discretized_gaussian_loglik")


def discretized_gaussian_loglik(x0, mean, var):
    """Log-likelihood of quantised ``x0``, summed per sample and averaged over the batch."""
    var = np.asarray(var, dtype=np.float64)
    if np.any(var <= 0):
        raise DomainError("discretized_gaussian_loglik requires strictly positive variance")
    ll = discretized_gaussian_log_likelihood(x0, mean, np.log(np.broadcast_to(var, np.shape(x0))))
    if ll.ndim == 0:
        return float(ll.data)
    return float(_reduce_rows(ll).data)


# ------------------------------------------------------------ variance head


def log_variance_from_v(v, t, sched: NoiseSchedule):
    """log Sigma = v log beta_t + (1 - v) log beta_tilde_t, differentiable in ``v``.

    At t=1, beta_tilde is replaced by a 1e-8 floor so the log stays finite.
    """
    v = as_tensor(v)
    t = sched.check_t(t)
    lb = diffusion.coef(sched.log_betas, t, v.ndim)
    lbt = diffusion.coef(sched.log_beta_tilde, t, v.ndim)
    return ops.add(ops.mul(v, lb - lbt), np.broadcast_to(lbt, v.shape))


def sigma_from_v(v, t, sched: NoiseSchedule):
    """Interpolated reverse-step variance as a numpy array."""
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    t = sched.check_t(t)
    lb = diffusion.coef(sched.log_betas, t, v.ndim)
    lbt = diffusion.coef(sched.log_beta_tilde, t, v.ndim)
    return np.exp(v * lb + (1.0 - v) * lbt)


# --------------------------------------------------------------- objectives


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def l_simple(model, x0, t, eps, cond, sched: NoiseSchedule, **model_kwargs):
    """Mean squared error between predicted and true noise."""
    x0, eps = _as_array(x0), _as_array(eps)
    xt = diffusion.q_sample(x0, t, eps, sched)
    eps_hat, _ = model(xt, t, cond, **model_kwargs)
    return ops.mse(eps_hat, eps)


def vlb_terms(x0, xt, t, eps_hat, v, sched: NoiseSchedule):
    """Per-sample bound term L_{t-1} (KL for t >= 2, decoder NLL for t = 1).

    The noise prediction enters only through its value: the mean path is
    stop-gradient, so only ``v`` receives gradient.
    """
    x0 = _as_array(x0)
    t = np.broadcast_to(sched.check_t(t), (x0.shape[0],))
    eps_value = stop_gradient(eps_hat).data
    mean_p = diffusion.mean_from_eps(xt, t, eps_value, sched)
    logvar_p = log_variance_from_v(v, t, sched)
    red = tuple(range(1, x0.ndim))

    pieces = []
    idx_kl = np.nonzero(t >= 2)[0]
    idx_nll = np.nonzero(t == 1)[0]
    if idx_kl.size:
        tk = t[idx_kl]
        q = diffusion.posterior(x0[idx_kl], xt[idx_kl], tk, sched)
        lv = logvar_p if idx_kl.size == len(t) else ops.getitem(logvar_p, idx_kl)
        kl = normal_kl(q.mean, np.log(q.variance), mean_p[idx_kl], lv)
        pieces.append((idx_kl, ops.sum(kl, axis=red) if red else kl))
    if idx_nll.size:
        lv = logvar_p if idx_nll.size == len(t) else ops.getitem(logvar_p, idx_nll)
        nll = ops.neg(discretized_gaussian_log_likelihood(x0[idx_nll], mean_p[idx_nll], lv))
        pieces.append((idx_nll, ops.sum(nll, axis=red) if red else nll))
    return pieces


def l_hybrid(model, x0, t, eps, cond, sched: NoiseSchedule, lam=0.001, **model_kwargs) -> HybridLossParts:
    """L_simple + lam * L_t with the bound term blind to the noise head."""
    x0, eps = _as_array(x0), _as_array(eps)
    xt = diffusion.q_sample(x0, t, eps, sched)
    eps_hat, v = model(xt, t, cond, **model_kwargs)
    simple = ops.mse(eps_hat, eps)
    batch = x0.shape[0]
    terms = [ops.sum(rows) for _, rows in vlb_terms(x0, xt, t, eps_hat, v, sched)]
    vlb = terms[0] if len(terms) == 1 else ops.add(terms[0], terms[1])
    vlb = ops.scale(vlb, 1.0 / batch)
    total = simple if lam == 0 else ops.add(simple, ops.scale(vlb, lam))
    return HybridLossParts(simple, vlb, float(lam), total)


def prior_kl(x0, sched: NoiseSchedule):
    """L_T = KL(q(x_T | x_0) || N(0, I)) per dimension, averaged; constant in the model."""
    x0 = np.asarray(x0, dtype=np.float64)
    abar = sched.alpha_bar[sched.T]
    kl = normal_kl(np.sqrt(abar) * x0, np.full(x0.shape, np.log1p(-abar)), 0.0, 0.0)
    return float(np.mean(kl.data))

"""Closed-form Gaussian diffusion quantities.

Functions take numpy arrays whose first axis is the batch. ``t`` is either a
single integer timestep or an integer array with one entry per batch row.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .schedule import NoiseSchedule


@dataclass
class GaussianMoments:
    mean: np.ndarray
    variance: np.ndarray


def coef(values, t, ndim):
    """Gather ``values[t]`` shaped to broadcast against a ``ndim``-D batch."""
    t = np.asarray(t)
    if t.ndim == 0:
        return values[int(t)]
    return values[t].reshape((-1,) + (1,) * (ndim - 1))


def _same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what}: shapes {np.shape(a)} and {np.shape(b)} differ")


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """Draw x_t from q(x_t | x_0) using the supplied noise ``eps``."""
    _same_shape(x0, eps, "q_sample")
    t = sched.check_t(t)
    abar = coef(sched.alpha_bar, t, np.ndim(x0))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def q_step(x_prev, t, eps, sched: NoiseSchedule):
    """One forward transition q(x_t | x_{t-1})."""
    _same_shape(x_prev, eps, "q_step")
    t = sched.check_t(t)
    beta = coef(sched.betas, t, np.ndim(x_prev))
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * eps


def posterior(x0, xt, t, sched: NoiseSchedule) -> GaussianMoments:
    """Moments of q(x_{t-1} | x_t, x_0)."""
    _same_shape(x0, xt, "posterior")
    t = sched.check_t(t)
    nd = np.ndim(x0)
    tm1 = t - 1
    abar = coef(sched.alpha_bar, t, nd)
    abar_prev = coef(sched.alpha_bar, tm1, nd)
    beta = coef(sched.betas, t, nd)
    alpha = coef(sched.alphas, t, nd)
    c0 = np.sqrt(abar_prev) * beta / (1.0 - abar)
    ct = np.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar)
    mean = c0 * x0 + ct * xt
    var = np.broadcast_to(coef(sched.beta_tilde, t, nd), np.shape(mean)).copy()
    return GaussianMoments(mean, var)


def mean_from_eps(xt, t, eps_hat, sched: NoiseSchedule):
    """Reverse-process mean implied by a noise prediction."""
    _same_shape(xt, eps_hat, "mean_from_eps")
    t = sched.check_t(t)
    nd = np.ndim(xt)
    beta = coef(sched.betas, t, nd)
    abar = coef(sched.alpha_bar, t, nd)
    alpha = coef(sched.alphas, t, nd)
    return (xt - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)


def predict_x0(xt, t, eps_hat, sched: NoiseSchedule):
    """x_0 estimate from x_t and a noise prediction."""
    _same_shape(xt, eps_hat, "predict_x0")
    t = sched.check_t(t)
    abar = coef(sched.alpha_bar, t, np.ndim(xt))
    return np.sqrt(1.0 / abar) * xt - np.sqrt(1.0 / abar - 1.0) * eps_hat


def eps_from_x0(xt, t, x0_hat, sched: NoiseSchedule):
    """Inverse of :func:`predict_x0`: the noise that maps ``xt`` to ``x0_hat``."""
    _same_shape(xt, x0_hat, "eps_from_x0")
    t = sched.check_t(t)
    abar = coef(sched.alpha_bar, t, np.ndim(xt))
    return (np.sqrt(1.0 / abar) * xt - x0_hat) / np.sqrt(1.0 / abar - 1.0)

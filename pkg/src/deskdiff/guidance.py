"""Sampling-time steering: classifier-free, classifier and image guidance, thresholding."""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ParameterError, ShapeError

DECAYS = ("linear", "constant", "cosine")
THRESHOLDS = ("none", "static", "dynamic")
THRESHOLD_TARGETS = ("x0", "eps")


@dataclass
class ImageGuide:
    base: np.ndarray
    scale: float
    decay: str = "linear"

    def __post_init__(self):
        if self.scale < 0:
            raise ParameterError(f"image guidance scale must be >= 0, got {self.scale}")
        if self.decay not in DECAYS:
            raise ParameterError(f"unknown decay {self.decay!r}; expected one of {DECAYS}")


@dataclass
class GuidanceConfig:
    """Everything that modifies a reverse step without retraining.

    ``threshold_target="x0"`` thresholds the predicted clean sample and
    re-derives the noise from it; ``"eps"`` applies the threshold to the
    guided noise prediction directly.
    """

    cfg_scale: float = 1.0
    classifier_scale: float = 0.0
    classifier_grad: Optional[Callable] = None
    image_guide: Optional[ImageGuide] = None
    threshold: str = "none"
    percentile: float = 99.5
    threshold_target: str = "x0"

    def __post_init__(self):
        if self.cfg_scale < 0:
            raise ParameterError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if self.classifier_scale < 0:
            raise ParameterError(f"classifier_scale must be >= 0, got {self.classifier_scale}")
        if self.classifier_scale > 0 and self.classifier_grad is None:
            raise ParameterError("classifier guidance needs a gradient callback")
        if self.threshold not in THRESHOLDS:
            raise ParameterError(f"unknown threshold {self.threshold!r}; expected one of {THRESHOLDS}")
        if not 0.0 < self.percentile < 100.0:
            raise ParameterError(f"percentile must be in (0, 100), got {self.percentile}")
        if self.threshold_target not in THRESHOLD_TARGETS:
            raise ParameterError(f"threshold_target must be one of {THRESHOLD_TARGETS}")


def classifier_free(eps_cond, eps_uncond, s):
    """eps_uncond + s * (eps_cond - eps_uncond)."""
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise ShapeError(f"classifier_free: {np.shape(eps_cond)} vs {np.shape(eps_uncond)}")
    if s == 1:
        return np.array(eps_cond, copy=True)
    if s == 0:
        return np.array(eps_uncond, copy=True)
    return eps_uncond + s * (eps_cond - eps_uncond)


def classifier_guided_mean(mean, variance, grad_log_p, w_c):
    """Shift a reverse-step mean along the classifier's log-probability gradient."""
    if np.any(np.asarray(variance) <= 0):
        raise ParameterError("classifier guidance needs positive variance")
    if w_c == 0:
        return np.array(mean, copy=True)
    return mean + w_c * variance * grad_log_p


def decay_factor(t, T, decay="linear"):
    if decay == "linear":
        return t / T
    if decay == "constant":
        return 1.0
    if decay == "cosine":
        return 0.5 * (1.0 - np.cos(np.pi * t / T))
    raise ParameterError(f"unknown decay {decay!r}; expected one of {DECAYS}")


def image_guide(xt, z, w, t, T, decay="linear"):
    """Pull ``xt`` toward the base image ``z`` by ``w * d_t`` of the gap."""
    if np.shape(xt) != np.shape(z) and np.shape(z) != np.shape(xt)[1:]:
        raise ShapeError(f"image_guide: base image shape {np.shape(z)} does not match {np.shape(xt)}")
    if w < 0:
        raise ParameterError(f"image guidance scale must be >= 0, got {w}")
    pull = w * decay_factor(t, T, decay)
    if pull == 0:
        return np.array(xt, copy=True)
    if pull == 1:
        return np.broadcast_to(z, np.shape(xt)).astype(np.result_type(xt), copy=True)
    return xt + pull * (z - xt)


def static_threshold(x):
    return np.clip(x, -1.0, 1.0)


def sample_percentile(values, percentile):
    """Linear-interpolated order statistic of each row of a 2-D array.

    Position ``h = (n - 1) * p / 100`` in the ascending sort; the result is
    ``v[floor(h)] + (h - floor(h)) * (v[floor(h) + 1] - v[floor(h)])``.
    """
    values = np.asarray(values)
    n = values.shape[1]
    h = (n - 1) * percentile / 100.0
    lo = int(np.floor(h))
    hi = min(lo + 1, n - 1)
    frac = h - lo
    part = np.partition(values, (lo, hi), axis=1)
    a = part[:, lo]
    b = part[:, hi]
    return a + frac * (b - a)


def dynamic_threshold(x0_hat, percentile=99.5):
    """Per-sample clamp to [-s, s] then divide by s, with s = max(1, percentile of |x|)."""
    if not 0.0 < percentile < 100.0:
        raise ParameterError(f"percentile must be in (0, 100), got {percentile}")
    x = np.asarray(x0_hat)
    flat = x.reshape(x.shape[0], -1) if x.ndim > 1 else x.reshape(1, -1)
    s = np.maximum(sample_percentile(np.abs(flat), percentile), 1.0)[:, None]
    out = np.clip(flat, -s, s) / s
    return out.reshape(x.shape)

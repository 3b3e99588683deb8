"""Ancestral DDPM sampling with guidance hooks."""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import backend, diffusion
from . import guidance as gd
from .autodiff.tensor import Tensor, no_grad
from .errors import ParameterError, SamplingError, ShapeError
from .losses import sigma_from_v
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)


@dataclass
class SampleRequest:
    count: int
    shape: tuple
    cond: Optional[np.ndarray] = None
    guidance: gd.GuidanceConfig = field(default_factory=gd.GuidanceConfig)
    seed: int = 0
    trace: bool = False
    trace_steps: Optional[tuple] = None

    def __post_init__(self):
        if self.count < 1:
            raise ParameterError(f"sample count must be >= 1, got {self.count}")


@dataclass
class SampleResult:
    samples: np.ndarray
    trace: dict = field(default_factory=dict)
    model_rows: int = 0


def default_trace_steps(T):
    """Multiples of T/10 (plus T itself)."""
    steps = {T} | {int(round(T * k / 10)) for k in range(1, 10)}
    return tuple(sorted((s for s in steps if 1 <= s <= T), reverse=True))


def _as_np(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _model_eval(model, x, t, cond, cfg_scale):
    """Guided noise and v-head for one step; conditional and null passes share one batch."""
    b = x.shape[0]
    if cfg_scale == 1:
        eps, v = model(x, t, cond)
        return _as_np(eps), _as_np(v), b
    null = np.zeros_like(cond) if cond is not None else None
    both_cond = None if cond is None else np.concatenate([cond, null], axis=0)
    eps, v = model(np.concatenate([x, x], axis=0), t, both_cond)
    eps, v = _as_np(eps), _as_np(v)
    guided = gd.classifier_free(eps[:b], eps[b:], cfg_scale)
    return guided, v[:b], 2 * b


def _summary(x):
    finite = np.isfinite(x)
    return f"nan={int(np.isnan(x).sum())} inf={int(np.isinf(x).sum())} max|x|={np.abs(x[finite]).max() if finite.any() else 'n/a'}"


def p_step(model, sched, x, t, cond, cfg, rng):
    """One reverse step x_t -> x_{t-1}. Returns (x_prev, rows evaluated)."""
    T = sched.T
    eps, v, rows = _model_eval(model, x, t, cond, cfg.cfg_scale)
    if cfg.threshold != "none":
        if cfg.threshold_target == "eps":
            eps = (
                gd.static_threshold(eps)
                if cfg.threshold == "static"
                else gd.dynamic_threshold(eps, cfg.percentile)
            )
        else:
            x0 = diffusion.predict_x0(x, t, eps, sched)
            x0 = (
                gd.static_threshold(x0)
                if cfg.threshold == "static"
                else gd.dynamic_threshold(x0, cfg.percentile)
            )
            eps = diffusion.eps_from_x0(x, t, x0, sched)
    mean = diffusion.mean_from_eps(x, t, eps, sched)
    var = sigma_from_v(v, t, sched)
    if cfg.classifier_scale > 0:
        grad = _as_np(cfg.classifier_grad(x, t, cond))
        mean = gd.classifier_guided_mean(mean, var, grad, cfg.classifier_scale)
    if t > 1:
        x_prev = mean + np.sqrt(var) * rng.standard_normal(x.shape)
    else:
        x_prev = mean
    if cfg.image_guide is not None:
        ig = cfg.image_guide
        x_prev = gd.image_guide(x_prev, ig.base, ig.scale, t, T, ig.decay)
    return x_prev.astype(backend.get_dtype(), copy=False), rows


def ddpm_sample(model, sched: NoiseSchedule, req: SampleRequest) -> SampleResult:
    """Run the reverse chain from x_T ~ N(0, I) down to x_0."""
    cfg = req.guidance
    shape = (req.count,) + tuple(req.shape)
    cond = None
    if req.cond is not None:
        cond = np.asarray(req.cond, dtype=np.float64)
        if cond.ndim == 1:
            cond = np.broadcast_to(cond, (req.count, cond.shape[0])).copy()
        if cond.shape[0] != req.count:
            raise ShapeError(f"conditioning batch {cond.shape[0]} != sample count {req.count}")
    if cfg.cfg_scale != 1 and cond is None:
        cond = np.zeros((req.count, model.cond_dim))
    if cfg.image_guide is not None and np.shape(cfg.image_guide.base) not in (shape, shape[1:]):
        raise ShapeError(f"image-guide base {np.shape(cfg.image_guide.base)} does not match samples {shape}")

    rng = np.random.default_rng(req.seed)
    x = rng.standard_normal(shape).astype(backend.get_dtype())
    trace_at = set(req.trace_steps or default_trace_steps(sched.T)) if req.trace else set()
    trace = {}
    rows = 0
    with no_grad():
        for t in range(sched.T, 0, -1):
            if t in trace_at:
                trace[t] = x.copy()
            x, n = p_step(model, sched, x, t, cond, cfg, rng)
            rows += n
            if not np.isfinite(x).all():
                raise SamplingError(f"non-finite latent after step t={t}: {_summary(x)}")
    if req.trace:
        trace[0] = x.copy()
    return SampleResult(x, trace, rows)


def reconstruct(model, sched, embedding, count, seed=0, guidance_cfg=None, shape=None):
    """Sample ``count`` variations conditioned on one embedding."""
    emb = np.asarray(embedding, dtype=np.float64)
    if emb.shape[-1] != model.cond_dim:
        raise ParameterError(f"embedding width {emb.shape[-1]} != decoder conditioning width {model.cond_dim}")
    shape = shape or model_sample_shape(model)
    req = SampleRequest(count, shape, emb, guidance_cfg or gd.GuidanceConfig(), seed)
    return ddpm_sample(model, sched, req).samples


def model_sample_shape(model):
    cfg = model.config
    if hasattr(cfg, "image_size"):
        return (cfg.in_channels, cfg.image_size, cfg.image_size)
    return (cfg.data_dim,)

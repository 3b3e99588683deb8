"""Central finite-difference gradient checks."""

import numpy as np

from ..errors import ParameterError
from .tensor import Tensor, grad_of, no_grad


def relative_error(analytic, numeric, floor_ratio=1e-4):
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is ``floor_ratio`` times the largest gradient magnitude, so
    entries that are tiny compared with the rest are judged on the overall
    scale rather than blowing up the ratio.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    if diff.size == 0:
        return 0.0
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor_ratio * scale)
    return float((diff / denom).max())


def _eval_at(f, x, idx, value):
    x.data[idx] = value
    return float(f(x).data.sum())


def _numeric_entry(f, x, idx, step, order=2):
    """Central difference along one entry: 2-point (``order=2``) or 4-point (``order=4``) stencil."""
    orig = x.data[idx]
    try:
        d1 = _eval_at(f, x, idx, orig + step) - _eval_at(f, x, idx, orig - step)
        if order == 2:
            return d1 / (2.0 * step)
        d2 = _eval_at(f, x, idx, orig + 2 * step) - _eval_at(f, x, idx, orig - 2 * step)
        return (8.0 * d1 - d2) / (12.0 * step)
    finally:
        x.data[idx] = orig


def _check_step(step, order):
    if step <= 0:
        raise ParameterError(f"finite-difference step must be positive, got {step}")
    if order not in (2, 4):
        raise ParameterError(f"stencil order must be 2 or 4, got {order}")


def numeric_gradient(f, x, step=1e-6, indices=None, order=2):
    """Central-difference gradient of scalar ``f`` at ``x`` (a Tensor, perturbed in place)."""
    _check_step(step, order)
    out = np.zeros(x.shape, dtype=np.float64)
    idxs = np.ndindex(*x.shape) if indices is None else indices
    with no_grad():
        for idx in idxs:
            out[idx] = _numeric_entry(f, x, idx, step, order)
    return out


def grad_check(f, x, step=1e-6, order=2):
    """Max relative error between backprop and central differences for ``f`` at ``x``.

    ``f`` maps a Tensor to a scalar Tensor. ``x`` may be a Tensor or array;
    it is copied, so the caller's value is untouched. ``order=4`` uses the
    five-point stencil, whose O(h^4) truncation error allows a larger step and
    so much less cancellation when the true gradient is tiny.
    """
    _check_step(step, order)
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    xt = Tensor(np.array(data, copy=True), requires_grad=True)
    f(xt).backward()
    analytic = grad_of(xt).copy()
    numeric = numeric_gradient(f, xt, step, order=order)
    return relative_error(analytic, numeric)


def check_parameters(loss_fn, params, step=1e-6, per_param=4, rng=None, order=2):
    """Spot-check gradients of ``loss_fn()`` w.r.t. named parameters.

    Picks ``per_param`` random entries of every tensor (all entries when the
    tensor is smaller). Returns ``{name: max relative error}`` computed over
    the sampled entries, with the floor taken from each tensor's full
    analytic gradient.
    """
    _check_step(step, order)
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    report = {}
    for name, p in params.items():
        analytic = grad_of(p).copy()
        flat = np.arange(p.size)
        pick = flat if p.size <= per_param else rng.choice(flat, size=per_param, replace=False)
        idxs = [np.unravel_index(i, p.shape) for i in pick]
        with no_grad():
            numeric = np.array([_numeric_entry(lambda _p: loss_fn(), p, idx, step, order) for idx in idxs])
        a = np.array([analytic[idx] for idx in idxs])
        scale = max(np.abs(analytic).max(), np.abs(numeric).max())
        if scale == 0.0:
            report[name] = 0.0
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-4 * scale)
        report[name] = float((np.abs(a - numeric) / denom).max())
    return report

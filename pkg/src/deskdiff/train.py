"""Optimisation: Adam with decoupled decay, clipping, EMA, LR decay and the two training loops."""

import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import io
from .autodiff import ops
from .autodiff.tensor import no_grad
from .errors import ConfigError, NonFiniteError, ParameterError
from .losses import l_hybrid, l_simple

log = logging.getLogger(__name__)


# ------------------------------------------------------------- optimiser


@dataclass
class OptimState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _finite(grads):
    return all(np.isfinite(g).all() for g in grads.values())


def adam_step(state: OptimState, params: dict, grads: dict, lr=None):
    """One bias-corrected Adam update in place. Returns False (and changes nothing) on a non-finite grad."""
    if not _finite(grads):
        return False
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay > 0:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= (lr * upd).astype(p.data.dtype)
    return True


def clip_grad_norm(grads: dict, max_norm: float):
    """Scale all grads together so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ParameterError(f"max_norm must be positive, got {max_norm}")
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if norm > max_norm:
        k = max_norm / norm
        grads = {n: g * k for n, g in grads.items()}
    return grads, norm


@dataclass
class EmaState:
    shadow: dict
    rate: float

    @classmethod
    def from_params(cls, params, rate):
        if not 0.0 <= rate < 1.0:
            raise ParameterError(f"EMA rate must be in [0, 1), got {rate}")
        return cls({n: np.array(p.data, copy=True) for n, p in params.items()}, rate)


def ema_update(ema: EmaState, params: dict):
    r = ema.rate
    for n, p in params.items():
        s = ema.shadow[n]
        s *= r
        s += (1.0 - r) * p.data


def lr_linear_decay(initial, step, total_steps):
    if not 0 <= step <= total_steps:
        raise ParameterError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return initial
    return initial * (1.0 - step / total_steps)


# --------------------------------------------------------------- decoder


@dataclass
class DecoderTrainConfig:
    iterations: int = 3000
    batch_size: int = 32
    lr: float = 3e-4
    lr_decay: bool = True
    drop_prob: float = 0.2
    lam: float = 0.001
    clip_norm: float = 1.0
    ema_rate: float = 0.9999
    seed: int = 0
    checkpoint_every: int = 500
    flip: bool = False
    log_every: int = 100
    eval_every: int = 0
    eval_batch: int = 256

    def validate(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ConfigError("drop_prob must be in [0, 1]")
        return self


@dataclass
class TrainResult:
    params: dict
    ema_params: dict
    loss_log: list
    events: list
    dropped: int = 0
    draws: int = 0
    eval_log: list = field(default_factory=list)


def _collect_grads(params):
    return {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}


def train_decoder(
    model, sched, dataset, config: DecoderTrainConfig, run_dir=None, extra_tensors=None, extra_meta=None
) -> TrainResult:
    """Noise-prediction training with embedding dropping for classifier-free guidance.

    ``dataset`` needs ``x`` (N, ...) and ``cond`` (N, cond_dim) arrays. When
    ``run_dir`` is given, checkpoints, ``metrics/loss.csv`` and an event log
    are written there; ``extra_tensors``/``extra_meta`` are stored in every
    checkpoint alongside the raw and EMA weights.
    """
    config.validate()
    x_all = np.asarray(dataset.x)
    c_all = np.asarray(dataset.cond)
    if len(x_all) == 0:
        raise ConfigError("training dataset is empty")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = OptimState(lr=config.lr)
    ema = EmaState.from_params(params, config.ema_rate)
    loss_log, events = [], []
    dropped = 0
    n = len(x_all)
    T = sched.T

    def save(step):
        if run_dir is None:
            return
        path = os.path.join(run_dir, "checkpoints", f"step_{step:06d}.ckpt")
        extras = {f"ema/{k}": v for k, v in ema.shadow.items()}
        extras.update(extra_tensors or {})
        meta = {"step": step, "train_config": asdict(config)}
        meta.update(extra_meta or {})
        io.save_checkpoint(path, model, sched, extras, meta)

    eval_log = []
    if config.eval_every:
        # fixed probe batch, drawn from its own stream so training draws are unaffected
        erng = np.random.default_rng([config.seed, 7])
        e_idx = erng.integers(0, n, config.eval_batch)
        probe = (x_all[e_idx], erng.integers(1, T + 1, config.eval_batch))
        probe = probe + (erng.standard_normal(probe[0].shape), c_all[e_idx])

    def probe_loss(state):
        saved = model.state_dict()
        model.load_state_dict(state)
        with no_grad():
            val = float(l_simple(model, probe[0], probe[1], probe[2], probe[3], sched).data)
        model.load_state_dict(saved)
        return val

    for step in range(1, config.iterations + 1):
        idx = rng.integers(0, n, config.batch_size)
        x0 = x_all[idx]
        cond = c_all[idx].astype(np.float64, copy=True)
        if config.flip:
            flip = rng.random(config.batch_size) < 0.5
            x0 = np.where(flip.reshape((-1,) + (1,) * (x0.ndim - 1)), x0[..., ::-1], x0)
        t = rng.integers(1, T + 1, config.batch_size)
        eps = rng.standard_normal(x0.shape)
        drop = rng.random(config.batch_size) < config.drop_prob
        cond[drop] = 0.0
        dropped += int(drop.sum())

        for p in params.values():
            p.grad = None
        parts = l_hybrid(model, x0, t, eps, cond, sched, config.lam, train=True, rng=rng)
        parts.total.backward()
        grads, norm = clip_grad_norm(_collect_grads(params), config.clip_norm)
        lr = lr_linear_decay(config.lr, step - 1, config.iterations) if config.lr_decay else config.lr
        if adam_step(opt, params, grads, lr):
            ema_update(ema, params)
        else:
            events.append({"step": step, "event": "skipped_nonfinite_grad", "grad_norm": norm})
            log.warning("step %d: non-finite gradient, update skipped", step)
        rec = parts.as_floats()
        if not all(np.isfinite(v) for v in rec.values()):
            raise NonFiniteError(f"non-finite loss at step {step}: {rec}")
        rec.update(step=step, grad_norm=norm, lr=lr)
        loss_log.append(rec)
        if config.log_every and step % config.log_every == 0:
            log.info("step %d loss %.5f (simple %.5f, vlb %.4f)", step, rec["total"], rec["l_simple"], rec["l_vlb"])
        if config.eval_every and step % config.eval_every == 0:
            raw = {k: p.data for k, p in params.items()}
            eval_log.append({"step": step, "raw": probe_loss(raw), "ema": probe_loss(ema.shadow)})
        if config.checkpoint_every and step % config.checkpoint_every == 0 and step != config.iterations:
            save(step)

    save(config.iterations)
    if run_dir is not None:
        write_loss_csv(os.path.join(run_dir, "metrics", "loss.csv"), loss_log)
        write_events(os.path.join(run_dir, "log", "events.jsonl"), events)
    return TrainResult(
        {k: np.array(p.data, copy=True) for k, p in params.items()},
        ema.shadow,
        loss_log,
        events,
        dropped,
        config.iterations * config.batch_size,
        eval_log,
    )


def write_loss_csv(path, loss_log):
    io.write_csv(
        path,
        ["step", "l_simple", "l_vlb", "total"],
        ((r["step"], r["l_simple"], r["l_vlb"], r["total"]) for r in loss_log),
    )


def write_events(path, events):
    import json

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(e, sort_keys=True, default=float) + "\n")


# ------------------------------------------------------------ translator


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x):
        x = np.asarray(x, dtype=np.float64)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), 1e-8))

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


@dataclass
class TranslatorTrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    val_fraction: float = 0.05
    patience: int = 10
    seed: int = 0


@dataclass
class TranslatorResult:
    params: dict
    best_epoch: int
    epochs_run: int
    history: list
    identity_mse: float
    best_val_mse: float
    text_stats: Standardizer
    image_stats: Standardizer


def split_pairs(n, val_fraction, rng):
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return perm[n_val:], perm[:n_val]


def _mse(model, x, y):
    with no_grad():
        pred = model(x).data
    return float(np.mean((pred.astype(np.float64) - y) ** 2))


def train_translator(
    model, text_emb, image_emb, config: TranslatorTrainConfig, text_stats=None, image_stats=None
) -> TranslatorResult:
    """Supervised text-to-image embedding regression with early stopping.

    Both sides are standardised, by default with statistics of the training
    split (pass ``image_stats`` to share the decoder's conditioning space); the
    returned parameters are those of the epoch with the lowest validation
    MSE (epoch 0 is the initialisation).
    """
    rng = np.random.default_rng(config.seed)
    text_emb = np.asarray(text_emb, dtype=np.float64)
    image_emb = np.asarray(image_emb, dtype=np.float64)
    tr, va = split_pairs(len(text_emb), config.val_fraction, rng)
    ts = text_stats or Standardizer.fit(text_emb[tr])
    is_ = image_stats or Standardizer.fit(image_emb[tr])
    xt, yt = ts.apply(text_emb[tr]), is_.apply(image_emb[tr])
    xv, yv = ts.apply(text_emb[va]), is_.apply(image_emb[va])
    identity = float(np.mean((xv - yv) ** 2))

    params = model.parameters()
    opt = OptimState(lr=config.lr, weight_decay=config.weight_decay)
    best = {k: np.array(p.data, copy=True) for k, p in params.items()}
    best_val = _mse(model, xv, yv)
    best_epoch = 0
    history = [{"epoch": 0, "train_mse": float("nan"), "val_mse": best_val}]
    stale = 0
    epoch = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(xt))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            b = order[start : start + config.batch_size]
            for p in params.values():
                p.grad = None
            loss = ops.mse(model(xt[b], train=True, rng=rng), yt[b])
            loss.backward()
            adam_step(opt, params, _collect_grads(params))
            total += float(loss.data) * len(b)
        val = _mse(model, xv, yv)
        history.append({"epoch": epoch, "train_mse": total / len(order), "val_mse": val})
        if val < best_val:
            best_val, best_epoch, stale = val, epoch, 0
            best = {k: np.array(p.data, copy=True) for k, p in params.items()}
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                break
    model.load_state_dict(best)
    return TranslatorResult(best, best_epoch, epoch, history, identity, best_val, ts, is_)

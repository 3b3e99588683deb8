"""Noise-prediction networks and the text-to-image embedding translator.

Every epsilon model is called as ``model(x_t, t, cond, train=False, rng=None)``
and returns ``(eps, v)`` Tensors shaped like ``x_t``; ``v`` lies in [0, 1]
and interpolates the reverse-step log-variance. ``cond=None`` means the null
embedding, which is the zero vector.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, as_tensor
from .errors import ConfigError, ParameterError, ShapeError
from .nn import Conv2d, GroupNorm, LayerNorm, Linear, Module


def sinusoidal_embedding(t, dim, max_period=10000.0):
    """Half sines, half cosines of ``t`` at geometrically spaced frequencies."""
    if dim % 2:
        raise ParameterError(f"embedding width must be even, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return Tensor(np.concatenate([np.sin(args), np.cos(args)], axis=1))


class EpsilonModel(Module):
    kind = "base"
    cond_dim = 0

    def _cond(self, cond, batch):
        if cond is None:
            return np.zeros((batch, self.cond_dim))
        c = cond.data if isinstance(cond, Tensor) else np.asarray(cond, dtype=np.float64)
        if c.ndim == 1:
            c = np.broadcast_to(c, (batch, c.shape[0]))
        if c.shape != (batch, self.cond_dim):
            raise ShapeError(f"conditioning must have width {self.cond_dim}, got shape {c.shape}")
        return c

    @staticmethod
    def _timesteps(t, batch):
        t = np.asarray(t)
        return np.full(batch, int(t)) if t.ndim == 0 else t

    def config_dict(self):
        raise NotImplementedError


# ------------------------------------------------------------------- MLP


@dataclass
class MLPConfig:
    data_dim: int = 2
    cond_dim: int = 16
    hidden: int = 128
    depth: int = 3
    time_dim: int = 32


class MLPEps(EpsilonModel):
    """Point-cloud noise predictor: [x_t, t-embedding, cond] through SiLU layers, two heads."""

    kind = "mlp"

    def __init__(self, config: MLPConfig, seed=0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.cond_dim = config.cond_dim
        c = config
        self.inp = Linear(c.data_dim + c.time_dim + c.cond_dim, c.hidden, rng)
        self.hidden = [Linear(c.hidden, c.hidden, rng) for _ in range(c.depth - 1)]
        self.eps_head = Linear(c.hidden, c.data_dim, rng)
        self.v_head = Linear(c.hidden, c.data_dim, rng)

    def forward(self, x_t, t, cond=None, train=False, rng=None):
        x = as_tensor(x_t)
        if x.ndim != 2 or x.shape[1] != self.config.data_dim:
            raise ShapeError(f"MLPEps expects (B, {self.config.data_dim}) input, got {x.shape}")
        b = x.shape[0]
        temb = sinusoidal_embedding(self._timesteps(t, b), self.config.time_dim)
        h = ops.concat([x, temb, Tensor(self._cond(cond, b))], axis=1)
        h = ops.silu(self.inp(h))
        for layer in self.hidden:
            h = ops.add(h, ops.silu(layer(h)))
        return self.eps_head(h), ops.sigmoid(self.v_head(h))

    def config_dict(self):
        return asdict(self.config)


# ---------------------------------------------------------------- U-Net


@dataclass
class TinyUNetConfig:
    in_channels: int = 3
    image_size: int = 16
    base_channels: int = 32
    channel_mult: tuple = (1, 2, 2)
    num_res_blocks: int = 2
    attention_resolutions: tuple = (4,)
    head_channels: int = 16
    dropout: float = 0.1
    cond_dim: int = 64
    norm_groups: int = 8

    def validate(self):
        levels = len(self.channel_mult)
        if self.image_size % (2 ** (levels - 1)):
            raise ConfigError(f"image_size {self.image_size} not divisible by 2^{levels - 1}")
        for m in self.channel_mult:
            ch = self.base_channels * m
            if ch % self.norm_groups:
                raise ConfigError(f"{ch} channels not divisible into {self.norm_groups} norm groups")
        res = self.image_size
        for m in self.channel_mult:
            if res in self.attention_resolutions and (self.base_channels * m) % self.head_channels:
                raise ConfigError(f"head width {self.head_channels} does not divide {self.base_channels * m}")
            res //= 2
        return self


FULL_SCALE_UNET = TinyUNetConfig(
    in_channels=3,
    image_size=64,
    base_channels=256,
    channel_mult=(1, 2, 3, 4),
    num_res_blocks=3,
    attention_resolutions=(32, 16, 8),
    head_channels=64,
    dropout=0.1,
    cond_dim=512,
    norm_groups=32,
)


class ResBlock(Module):
    """GN-SiLU-conv twice with a projected embedding in between; optional BigGAN-style resample."""

    def __init__(self, c_in, c_out, emb_dim, groups, dropout, rng, resample=None):
        self.resample = resample
        self.dropout = dropout
        self.norm1 = GroupNorm(groups, c_in)
        self.conv1 = Conv2d(c_in, c_out, rng)
        self.emb = Linear(emb_dim, c_out, rng)
        self.norm2 = GroupNorm(groups, c_out)
        self.conv2 = Conv2d(c_out, c_out, rng)
        self.skip = None if c_in == c_out else Conv2d(c_in, c_out, rng, kernel=1)

    def _resample(self, x):
        if self.resample == "down":
            return ops.avg_pool2(x)
        if self.resample == "up":
            return ops.upsample2(x)
        return x

    def forward(self, x, emb, train=False, rng=None):
        h = ops.silu(self.norm1(x))
        h = self.conv1(self._resample(h))
        x = self._resample(x)
        e = self.emb(emb)
        h = ops.add(h, ops.reshape(e, e.shape + (1, 1)))
        h = ops.silu(self.norm2(h))
        h = ops.dropout(h, self.dropout, rng, train)
        h = self.conv2(h)
        skip = x if self.skip is None else self.skip(x)
        return ops.add(skip, h)


class AttentionBlock(Module):
    """Multi-head self-attention over flattened pixels, residual scaled by 1/sqrt(2)."""

    def __init__(self, channels, head_channels, emb_dim, groups, rng):
        self.heads = channels // head_channels
        self.head_dim = head_channels
        self.norm = GroupNorm(groups, channels)
        self.emb = Linear(emb_dim, channels, rng)
        self.qkv = Conv2d(channels, 3 * channels, rng, kernel=1)
        self.proj = Conv2d(channels, channels, rng, kernel=1)

    def forward(self, x, emb, train=False, rng=None):
        b, c, hh, ww = x.shape
        n = hh * ww
        e = self.emb(emb)
        h = ops.add(self.norm(x), ops.reshape(e, e.shape + (1, 1)))
        qkv = ops.reshape(self.qkv(h), (b, 3, self.heads, self.head_dim, n))
        q, k, v = (ops.getitem(qkv, (slice(None), i)) for i in range(3))
        logits = ops.scale(ops.matmul(ops.transpose(q, (0, 1, 3, 2)), k), 1.0 / np.sqrt(self.head_dim))
        attn = ops.softmax(logits, axis=-1)
        out = ops.matmul(v, ops.transpose(attn, (0, 1, 3, 2)))
        out = self.proj(ops.reshape(out, (b, c, hh, ww)))
        return ops.scale(ops.add(x, out), 1.0 / np.sqrt(2.0))


class Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def forward(self, h, emb, train=False, rng=None):
        for block in self.blocks:
            h = block(h, emb, train, rng)
        return h


class TinyUNet(EpsilonModel):
    kind = "unet"

    def __init__(self, config: TinyUNetConfig, seed=0):
        config.validate()
        rng = np.random.default_rng(seed)
        self.config = config
        self.cond_dim = config.cond_dim
        c = config
        base = c.base_channels
        emb = 4 * base
        self.time1 = Linear(base, emb, rng)
        self.time2 = Linear(emb, emb, rng)
        self.cond_proj = Linear(c.cond_dim, emb, rng)
        self.conv_in = Conv2d(c.in_channels, base, rng)

        def res(ci, co, resample=None):
            return ResBlock(ci, co, emb, c.norm_groups, c.dropout, rng, resample)

        def attn(ch):
            return AttentionBlock(ch, c.head_channels, emb, c.norm_groups, rng)

        # each stage ends at a skip point (encoder) or consumes one skip (decoder)
        self.down = []
        skip_ch = [base]
        ch = base
        size = c.image_size
        for level, mult in enumerate(c.channel_mult):
            for _ in range(c.num_res_blocks):
                blocks = [res(ch, base * mult)]
                ch = base * mult
                if size in c.attention_resolutions:
                    blocks.append(attn(ch))
                self.down.append(Stage(blocks))
                skip_ch.append(ch)
            if level != len(c.channel_mult) - 1:
                self.down.append(Stage([res(ch, ch, "down")]))
                size //= 2
                skip_ch.append(ch)

        mid = [res(ch, ch)]
        if ch % c.head_channels == 0:
            mid.append(attn(ch))
        mid.append(res(ch, ch))
        self.mid = Stage(mid)

        self.up = []
        for level, mult in reversed(list(enumerate(c.channel_mult))):
            for i in range(c.num_res_blocks + 1):
                blocks = [res(ch + skip_ch.pop(), base * mult)]
                ch = base * mult
                if size in c.attention_resolutions:
                    blocks.append(attn(ch))
                if level and i == c.num_res_blocks:
                    blocks.append(res(ch, ch, "up"))
                    size *= 2
                self.up.append(Stage(blocks))
        self.norm_out = GroupNorm(c.norm_groups, ch)
        self.eps_head = Conv2d(ch, c.in_channels, rng, kernel=1)
        self.v_head = Conv2d(ch, c.in_channels, rng, kernel=1)

    def forward(self, x_t, t, cond=None, train=False, rng=None):
        c = self.config
        x = as_tensor(x_t)
        expect = (c.in_channels, c.image_size, c.image_size)
        if x.ndim != 4 or x.shape[1:] != expect:
            raise ShapeError(f"TinyUNet expects (B, {expect}) input, got {x.shape}")
        b = x.shape[0]
        temb = sinusoidal_embedding(self._timesteps(t, b), c.base_channels)
        emb = self.time2(ops.silu(self.time1(temb)))
        emb = ops.silu(ops.add(emb, self.cond_proj(Tensor(self._cond(cond, b)))))

        h = self.conv_in(x)
        skips = [h]
        for stage in self.down:
            h = stage(h, emb, train, rng)
            skips.append(h)
        h = self.mid(h, emb, train, rng)
        for stage in self.up:
            h = stage(ops.concat([h, skips.pop()], axis=1), emb, train, rng)
        h = ops.silu(self.norm_out(h))
        return self.eps_head(h), ops.sigmoid(self.v_head(h))

    def config_dict(self):
        d = asdict(self.config)
        d["channel_mult"] = list(d["channel_mult"])
        d["attention_resolutions"] = list(d["attention_resolutions"])
        return d


# ----------------------------------------------------------- translator


@dataclass
class TranslatorConfig:
    width: int = 64
    layers: int = 4
    hidden_mult: int = 2
    dropout: float = 0.1
    zero_init_out: bool = False


class TranslatorBlock(Module):
    def __init__(self, width, hidden, dropout, rng):
        self.dropout = dropout
        self.norm = LayerNorm(width)
        self.fc1 = Linear(width, hidden, rng)
        self.fc2 = Linear(hidden, width, rng)

    def forward(self, x, train=False, rng=None):
        h = self.fc2(ops.gelu(self.fc1(self.norm(x))))
        return ops.add(x, ops.dropout(h, self.dropout, rng, train))


class TranslatorMLP(Module):
    """Text-embedding to image-embedding regressor: projection, N residual MLP layers, projection."""

    kind = "translator"

    def __init__(self, config: TranslatorConfig, seed=0):
        rng = np.random.default_rng(seed)
        self.config = config
        w = config.width
        self.proj_in = Linear(w, w, rng)
        self.blocks = [TranslatorBlock(w, config.hidden_mult * w, config.dropout, rng) for _ in range(config.layers)]
        self.proj_out = Linear(w, w, rng, zero=config.zero_init_out)

    def forward(self, y_t, train=False, rng=None):
        x = as_tensor(y_t)
        if x.shape[-1] != self.config.width:
            raise ShapeError(f"translator expects width {self.config.width}, got {x.shape[-1]}")
        h = self.proj_in(x)
        for block in self.blocks:
            h = block(h, train, rng)
        return self.proj_out(h)

    def config_dict(self):
        return asdict(self.config)


# ------------------------------------------------------- analytic oracle


@dataclass
class AnalyticGaussianEps:
    """Exact noise predictor for 1-D Gaussian data N(mean, std^2) under a given schedule.

    ``v`` is a constant head value (0 gives beta_tilde, 1 gives beta).
    """

    schedule: object
    mean: float = 0.0
    std: float = 1.0
    v: float = 1.0
    cond_dim: int = 0
    calls: list = field(default_factory=list)

    def __call__(self, x_t, t, cond=None, train=False, rng=None):
        x = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t)
        t = np.asarray(t)
        idx = t if t.ndim == 0 else t.reshape((-1,) + (1,) * (x.ndim - 1))
        abar = self.schedule.alpha_bar[idx]
        marg_var = abar * self.std**2 + 1.0 - abar
        eps = np.sqrt(1.0 - abar) * (x - np.sqrt(abar) * self.mean) / marg_var
        self.calls.append(x.shape[0])
        return Tensor(eps), Tensor(np.full(x.shape, self.v))


def build_model(kind, config, seed=0):
    if kind == "mlp":
        return MLPEps(MLPConfig(**config), seed)
    if kind == "unet":
        cfg = dict(config)
        cfg["channel_mult"] = tuple(cfg["channel_mult"])
        cfg["attention_resolutions"] = tuple(cfg["attention_resolutions"])
        return TinyUNet(TinyUNetConfig(**cfg), seed)
    if kind == "translator":
        return TranslatorMLP(TranslatorConfig(**config), seed)
    raise ConfigError(f"unknown model kind {kind!r}")

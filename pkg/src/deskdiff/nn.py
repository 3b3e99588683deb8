"""Minimal parameter containers and layers built on the autodiff ops."""

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor
from .errors import ShapeError


class Module:
    """Holds Tensors and sub-modules as attributes; names follow attribute paths."""

    def parameters(self, prefix=""):
        out = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[name] = value
            elif isinstance(value, Module):
                out.update(value.parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.parameters(f"{name}.{i}."))
        return out

    def state_dict(self):
        return {k: np.array(v.data, copy=True) for k, v in self.parameters().items()}

    def load_state_dict(self, state, strict=True):
        params = self.parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise ShapeError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters().values()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr):
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, zero=False):
        bound = 1.0 / np.sqrt(n_in)
        w = np.zeros((n_in, n_out)) if zero else rng.uniform(-bound, bound, (n_in, n_out))
        self.weight = _param(w)
        self.bias = _param(np.zeros(n_out))

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in, c_out, rng, kernel=3, zero=False):
        bound = 1.0 / np.sqrt(c_in * kernel * kernel)
        shape = (c_out, c_in, kernel, kernel)
        self.weight = _param(np.zeros(shape) if zero else rng.uniform(-bound, bound, shape))
        self.bias = _param(np.zeros(c_out))

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, groups, channels):
        self.groups = groups
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))

    def forward(self, x):
        return ops.group_norm(x, self.groups, self.gamma, self.beta)


class LayerNorm(Module):
    def __init__(self, width):
        self.gamma = _param(np.ones(width))
        self.beta = _param(np.zeros(width))

    def forward(self, x):
        return ops.layer_norm(x, self.gamma, self.beta)

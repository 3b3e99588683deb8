"""Finite-difference checks over every registered op and over whole networks.

Each case builds random inputs for one op and reduces its output against a
fixed random weighting, so every output entry matters. The gradient of each
differentiable input is checked separately. Runs in float64.
"""

import numpy as np

from .. import backend
from . import ops
from .gradcheck import check_parameters, grad_check
from .tensor import Tensor

OP_TOLERANCE = 1e-4
NET_TOLERANCE = 1e-3
# five-point stencil: the larger step keeps cancellation small where the true
# gradient is tiny (e.g. layer norm over two entries, whose output is nearly +-1)
STEP = 1e-4
ORDER = 4


def _weighted(out, rng):
    w = Tensor(rng.standard_normal(out.shape))
    return ops.sum(ops.mul(out, w))


def _shape(rng, ndim, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, ndim))


def _check_inputs(fn, inputs, rng, step, order=ORDER):
    """Max error over each input of ``fn(*inputs)`` with the others held fixed."""
    w_rng_seed = int(rng.integers(1 << 30))
    worst = 0.0
    for i in range(len(inputs)):

        def f(x, i=i):
            args = list(inputs)
            args[i] = x
            return _weighted(fn(*args), np.random.default_rng(w_rng_seed))

        worst = max(worst, grad_check(f, inputs[i], step, order))
    return worst


def _cases():
    """op name -> function(rng) returning (fn, list of input arrays)."""

    def unary(fn, positive=False, nd=(1, 3)):
        def make(rng):
            shp = _shape(rng, int(rng.integers(nd[0], nd[1] + 1)))
            x = rng.standard_normal(shp)
            if positive:
                x = np.abs(x) + 0.5
            return fn, [x]

        return make

    def binary(fn, positive_b=False):
        def make(rng):
            shp = _shape(rng, int(rng.integers(1, 4)))
            a = rng.standard_normal(shp)
            # right operand sometimes broadcast along the leading axis
            b_shape = shp[1:] if len(shp) > 1 and rng.random() < 0.5 else shp
            b = rng.standard_normal(b_shape)
            if positive_b:
                b = np.sign(b) * (np.abs(b) + 0.5)
            return fn, [a, b]

        return make

    def sum_case(reducer):
        def make(rng):
            shp = _shape(rng, 3)
            axis = None if rng.random() < 0.3 else int(rng.integers(0, 3))
            keep = bool(rng.random() < 0.5)
            return (lambda x: reducer(x, axis=axis, keepdims=keep)), [rng.standard_normal(shp)]

        return make

    def reshape_case(rng):
        shp = _shape(rng, 3)
        return (lambda x: ops.reshape(x, (-1,))), [rng.standard_normal(shp)]

    def transpose_case(rng):
        shp = _shape(rng, 3)
        axes = tuple(int(a) for a in rng.permutation(3))
        return (lambda x: ops.transpose(x, axes)), [rng.standard_normal(shp)]

    def getitem_case(rng):
        shp = _shape(rng, 2, 2, 5)
        if rng.random() < 0.5:
            index = (slice(0, max(1, shp[0] - 1)), slice(None, None, 2))
        else:
            index = (rng.integers(0, shp[0], 4),)
        return (lambda x: ops.getitem(x, index)), [rng.standard_normal(shp)]

    def concat_case(rng):
        shp = _shape(rng, 3)
        axis = int(rng.integers(0, 3))
        other = list(shp)
        other[axis] = int(rng.integers(1, 4))
        return (lambda a, b: ops.concat([a, b], axis=axis)), [rng.standard_normal(shp), rng.standard_normal(other)]

    def matmul_case(rng):
        b_, m, k, n = _shape(rng, 4)
        a = rng.standard_normal((b_, m, k))
        b = rng.standard_normal((k, n)) if rng.random() < 0.5 else rng.standard_normal((b_, k, n))
        return ops.matmul, [a, b]

    def linear_case(rng):
        n, i, o = _shape(rng, 3)
        return ops.linear, [rng.standard_normal((n, i)), rng.standard_normal((i, o)), rng.standard_normal(o)]

    def conv_case(rng):
        b, c, o = _shape(rng, 3, 1, 3)
        h, w = _shape(rng, 2, 2, 5)
        k = 3 if rng.random() < 0.7 else 1
        return ops.conv2d, [rng.standard_normal((b, c, h, w)), rng.standard_normal((o, c, k, k)), rng.standard_normal(o)]

    def pool_case(rng):
        b, c = _shape(rng, 2, 1, 2)
        h, w = (2 * v for v in _shape(rng, 2, 1, 3))
        return ops.avg_pool2, [rng.standard_normal((b, c, h, w))]

    def up_case(rng):
        b, c, h, w = _shape(rng, 4, 1, 3)
        return ops.upsample2, [rng.standard_normal((b, c, h, w))]

    def gn_case(rng):
        groups = int(rng.integers(1, 3))
        c = groups * int(rng.integers(1, 3))
        b, h, w = _shape(rng, 3, 1, 3)
        fn = lambda x, g, be: ops.group_norm(x, groups, g, be)  # noqa: E731
        return fn, [rng.standard_normal((b, c, h, w)), rng.standard_normal(c), rng.standard_normal(c)]

    def ln_case(rng):
        n, d = _shape(rng, 2, 2, 5)
        return ops.layer_norm, [rng.standard_normal((n, d)), rng.standard_normal(d), rng.standard_normal(d)]

    def softmax_case(rng):
        shp = _shape(rng, 2, 2, 5)
        axis = int(rng.integers(0, 2))
        return (lambda x: ops.softmax(x, axis=axis)), [rng.standard_normal(shp)]

    def dropout_case(rng):
        seed = int(rng.integers(1 << 30))
        shp = _shape(rng, 2, 2, 5)
        # same mask on every evaluation
        return (lambda x: ops.dropout(x, 0.3, np.random.default_rng(seed), True)), [rng.standard_normal(shp)]

    def se_case(reducer):
        def make(rng):
            shp = _shape(rng, 2)
            return reducer, [rng.standard_normal(shp), rng.standard_normal(shp)]

        return make

    return {
        "add": binary(ops.add),
        "sub": binary(ops.sub),
        "mul": binary(ops.mul),
        "div": binary(ops.div, positive_b=True),
        "scale": unary(lambda x: ops.scale(x, -1.7)),
        "neg": unary(ops.neg),
        "power": unary(lambda x: ops.power(x, 2.5), positive=True),
        "exp": unary(ops.exp),
        "log": unary(ops.log, positive=True),
        "sqrt": unary(ops.sqrt, positive=True),
        "tanh": unary(ops.tanh),
        "sigmoid": unary(ops.sigmoid),
        "silu": unary(ops.silu),
        "gelu": unary(ops.gelu),
        "squared_error": se_case(ops.squared_error),
        "mse": se_case(ops.mse),
        "sum": sum_case(ops.sum),
        "mean": sum_case(ops.mean),
        "reshape": reshape_case,
        "transpose": transpose_case,
        "getitem": getitem_case,
        "concat": concat_case,
        "matmul": matmul_case,
        "linear": linear_case,
        "conv2d": conv_case,
        "avg_pool2": pool_case,
        "upsample2": up_case,
        "group_norm": gn_case,
        "layer_norm": ln_case,
        "softmax": softmax_case,
        "dropout": dropout_case,
    }


def op_suite(trials=3, seed=0, step=STEP, names=None, order=ORDER):
    """``{op: max relative error over trials}`` for every registered op."""
    cases = _cases()
    out = {}
    with backend.precision(64):
        for name in names or ops.OP_NAMES:
            rng = np.random.default_rng([seed, ops.OP_NAMES.index(name)])
            worst = 0.0
            for _ in range(trials):
                fn, inputs = cases[name](rng)
                worst = max(worst, _check_inputs(fn, inputs, rng, step, order))
            out[name] = worst
    return out


def network_suite(seed=0, step=STEP, per_param=3, order=ORDER):
    """Spot-check parameter and input gradients of the U-Net, the point MLP and the translator.

    The scalar is a fixed random weighting of both output heads. The hybrid
    loss is not used here: its stop-gradient makes the analytic gradient
    differ from the finite difference by design.
    """
    from ..models import MLPConfig, MLPEps, TinyUNet, TinyUNetConfig, TranslatorConfig, TranslatorMLP

    report = {}
    with backend.precision(64):
        rng = np.random.default_rng(seed)

        ucfg = TinyUNetConfig(
            in_channels=1,
            image_size=8,
            base_channels=8,
            channel_mult=(1, 2),
            num_res_blocks=1,
            attention_resolutions=(4,),
            head_channels=8,
            dropout=0.0,
            cond_dim=4,
            norm_groups=4,
        )
        unet = TinyUNet(ucfg, seed)
        x0 = rng.standard_normal((1, 1, 8, 8))
        cond = rng.standard_normal((1, 4))
        t = int(rng.integers(1, 21))

        def unet_loss():
            e, v = unet(x0, t, cond)
            return ops.add(_weighted(e, np.random.default_rng(3)), _weighted(v, np.random.default_rng(4)))

        report["unet"] = max(check_parameters(unet_loss, unet.parameters(), step, per_param, rng, order).values())
        report["unet_input"] = grad_check(lambda x: _weighted(unet(x, 5, cond)[0], np.random.default_rng(1)), x0, step, order)

        mlp = MLPEps(MLPConfig(data_dim=2, cond_dim=3, hidden=16, depth=3, time_dim=8), seed)
        xb = rng.standard_normal((4, 2))
        cb = rng.standard_normal((4, 3))
        tb = rng.integers(1, 21, 4)

        def mlp_loss():
            e, v = mlp(xb, tb, cb)
            return ops.add(_weighted(e, np.random.default_rng(3)), _weighted(v, np.random.default_rng(4)))

        report["mlp"] = max(check_parameters(mlp_loss, mlp.parameters(), step, per_param, rng, order).values())

        tr = TranslatorMLP(TranslatorConfig(width=6, layers=2, dropout=0.0), seed)
        yt = rng.standard_normal((5, 6))
        report["translator"] = max(
            check_parameters(lambda: _weighted(tr(yt), np.random.default_rng(5)), tr.parameters(), step, per_param, rng, order).values()
        )
        report["translator_input"] = grad_check(lambda y: _weighted(tr(y), np.random.default_rng(2)), yt, step, order)
    return report

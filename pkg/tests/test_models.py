import numpy as np
import pytest

from deskdiff import backend
from deskdiff.autodiff import ops
from deskdiff.autodiff.tensor import grad_of
from deskdiff.errors import ConfigError, ParameterError, ShapeError
from deskdiff.models import (
    FULL_SCALE_UNET,
    MLPConfig,
    MLPEps,
    TinyUNet,
    TinyUNetConfig,
    TranslatorConfig,
    TranslatorMLP,
    build_model,
    sinusoidal_embedding,
)

SMALL = TinyUNetConfig(
    in_channels=1, image_size=8, base_channels=8, channel_mult=(1, 2), num_res_blocks=1,
    attention_resolutions=(4,), head_channels=8, dropout=0.0, cond_dim=4, norm_groups=4,
)


def mlp():
    return MLPEps(MLPConfig(data_dim=2, cond_dim=3, hidden=16, depth=3, time_dim=8), seed=1)


class TestEmbedding:
    def test_zero_step(self):
        e = sinusoidal_embedding(0, 16).data[0]
        np.testing.assert_array_equal(e[:8], 0.0)
        np.testing.assert_array_equal(e[8:], 1.0)

    def test_bounded_and_distinct(self):
        e = sinusoidal_embedding(np.arange(1001), 128).data
        assert np.abs(e).max() <= 1.0
        sq = (e**2).sum(1)
        d2 = sq[:, None] + sq[None, :] - 2 * e @ e.T
        np.fill_diagonal(d2, np.inf)
        assert d2.min() > 1e-6

    def test_odd_width(self):
        with pytest.raises(ParameterError):
            sinusoidal_embedding(3, 7)


class TestShapes:
    def test_unet_heads(self, rng):
        x = rng.standard_normal((2, 1, 8, 8))
        eps, v = TinyUNet(SMALL)(x, 5)
        assert eps.shape == v.shape == x.shape
        assert v.data.min() >= 0 and v.data.max() <= 1

    def test_mlp_heads(self, rng):
        eps, v = mlp()(rng.standard_normal((4, 2)), np.array([1, 2, 3, 4]))
        assert eps.shape == v.shape == (4, 2)

    def test_input_checks(self):
        with pytest.raises(ShapeError):
            TinyUNet(SMALL)(np.zeros((1, 1, 4, 4)), 1)
        with pytest.raises(ShapeError):
            mlp()(np.zeros((2, 3)), 1)
        with pytest.raises(ShapeError):
            mlp()(np.zeros((2, 2)), 1, np.zeros((2, 5)))

    def test_config_validation(self):
        import dataclasses

        FULL_SCALE_UNET.validate()
        TinyUNetConfig().validate()

        with pytest.raises(ConfigError):
            TinyUNet(dataclasses.replace(SMALL, image_size=6, channel_mult=(1, 2, 2)))
        with pytest.raises(ConfigError):
            TinyUNet(dataclasses.replace(SMALL, head_channels=3))
        with pytest.raises(ConfigError):
            build_model("transformer", {})


@pytest.mark.parametrize("make", [lambda: TinyUNet(SMALL, seed=2), mlp], ids=["unet", "mlp"])
def test_zero_and_null_conditioning_agree(f64, rng, make):
    m = make()
    shape = (3, 1, 8, 8) if isinstance(m, TinyUNet) else (3, 2)
    x = rng.standard_normal(shape)
    a, _ = m(x, 4, None)
    b, _ = m(x, 4, np.zeros((3, m.cond_dim)))
    np.testing.assert_array_equal(a.data, b.data)


@pytest.mark.parametrize("make", [lambda: TinyUNet(SMALL, seed=2), mlp], ids=["unet", "mlp"])
def test_batch_independence(f64, rng, make):
    m = make()
    shape = (4, 1, 8, 8) if isinstance(m, TinyUNet) else (4, 2)
    x = rng.standard_normal(shape)
    t = np.array([1, 5, 9, 13])
    c = rng.standard_normal((4, m.cond_dim))
    eps, v = m(x, t, c)
    perm = np.array([2, 0, 3, 1])
    eps_p, v_p = m(x[perm], t[perm], c[perm])
    np.testing.assert_allclose(eps_p.data, eps.data[perm], atol=1e-12)
    eps_d, _ = m(np.concatenate([x, x]), np.concatenate([t, t]), np.concatenate([c, c]))
    np.testing.assert_allclose(eps_d.data[:4], eps.data, atol=1e-12)
    np.testing.assert_allclose(eps_d.data[4:], eps.data, atol=1e-12)


@pytest.mark.parametrize("head", [0, 1], ids=["eps", "v"])
def test_each_head_reaches_whole_trunk(f64, rng, head):
    m = TinyUNet(SMALL, seed=3)
    out = m(rng.standard_normal((2, 1, 8, 8)), np.array([3, 7]), rng.standard_normal((2, 4)))[head]
    ops.sum(ops.mul(out, out)).backward()
    trunk = {k: p for k, p in m.parameters().items() if not k.startswith(("eps_head", "v_head"))}
    dead = [k for k, p in trunk.items() if p.grad is None or not np.any(grad_of(p))]
    assert dead == []


def test_unet_deterministic_without_dropout(rng):
    m = TinyUNet(SMALL, seed=4)
    x = rng.standard_normal((2, 1, 8, 8))
    a = m(x, 3)[0].data
    b = m(x, 3)[0].data
    assert a.tobytes() == b.tobytes()


def test_dropout_active_only_in_training(rng):
    import dataclasses

    m = TinyUNet(dataclasses.replace(SMALL, dropout=0.5), seed=4)
    x = rng.standard_normal((2, 1, 8, 8))
    np.testing.assert_array_equal(m(x, 3)[0].data, m(x, 3)[0].data)
    a = m(x, 3, train=True, rng=np.random.default_rng(0))[0].data
    assert np.abs(a - m(x, 3)[0].data).max() > 0


class TestTranslator:
    def test_zero_head_outputs_zero(self, rng):
        m = TranslatorMLP(TranslatorConfig(width=16, layers=2, zero_init_out=True))
        np.testing.assert_array_equal(m(rng.standard_normal((5, 16))).data, 0.0)

    def test_no_layers_is_two_projections(self, f64, rng):
        m = TranslatorMLP(TranslatorConfig(width=8, layers=0))
        x = rng.standard_normal((3, 8))
        h = x @ m.proj_in.weight.data + m.proj_in.bias.data
        np.testing.assert_allclose(m(x).data, h @ m.proj_out.weight.data + m.proj_out.bias.data, atol=1e-12)

    def test_width_check(self):
        with pytest.raises(ShapeError):
            TranslatorMLP(TranslatorConfig(width=8))(np.zeros((2, 6)))


def test_build_model_round_trip():
    m = TinyUNet(SMALL, seed=6)
    again = build_model("unet", m.config_dict(), seed=6)
    for k, p in m.parameters().items():
        np.testing.assert_array_equal(p.data, again.parameters()[k].data)


def test_parameters_follow_precision():
    with backend.precision(32):
        assert mlp()(np.zeros((1, 2)), 1)[0].data.dtype == np.float32
    with backend.precision(64):
        assert mlp()(np.zeros((1, 2)), 1)[0].data.dtype == np.float64

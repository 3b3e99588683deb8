import numpy as np
import pytest

from deskdiff.autodiff.tensor import Tensor
from deskdiff.data import linear_pairs, make_dataset
from deskdiff.errors import ConfigError, ParameterError
from deskdiff.models import MLPConfig, MLPEps, TranslatorConfig, TranslatorMLP
from deskdiff.schedule import cosine_schedule
from deskdiff.train import (
    DecoderTrainConfig,
    EmaState,
    OptimState,
    TranslatorTrainConfig,
    adam_step,
    clip_grad_norm,
    ema_update,
    lr_linear_decay,
    train_decoder,
    train_translator,
)


def param(values):
    return {"w": Tensor(np.array(values, dtype=np.float64), requires_grad=True)}


class TestAdam:
    def test_first_step_formula(self, f64):
        p = param([1.0, -2.0, 0.5])
        g = np.array([0.3, -4.0, 1e-3])
        st = OptimState(lr=0.01)
        assert adam_step(st, p, {"w": g})
        # bias-corrected moments equal g and g^2 on the first step
        expected = np.array([1.0, -2.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p["w"].data, expected, rtol=0, atol=1e-15)
        np.testing.assert_allclose(p["w"].data - [1.0, -2.0, 0.5], -0.01 * np.sign(g), atol=1e-7)

    def test_zero_grad_no_decay(self):
        p = param([1.0, 2.0])
        adam_step(OptimState(lr=0.1), p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])

    def test_decoupled_decay(self, f64):
        p = param([1.0, -3.0])
        adam_step(OptimState(lr=0.5, weight_decay=1e-4), p, {"w": np.zeros(2)})
        np.testing.assert_allclose(p["w"].data, np.array([1.0, -3.0]) * (1 - 0.5e-4), rtol=1e-15)

    def test_nonfinite_grad_skipped(self):
        p = param([1.0])
        st = OptimState(lr=0.1)
        assert not adam_step(st, p, {"w": np.array([np.nan])})
        assert st.step == 0 and p["w"].data[0] == 1.0


class TestClip:
    def test_three_four_five(self):
        g, norm = clip_grad_norm({"a": np.array([3.0, 4.0])}, 1.0)
        np.testing.assert_allclose(g["a"], [0.6, 0.8])
        assert norm == 5.0

    def test_identity_below_max(self):
        g0 = {"a": np.array([0.1, 0.2]), "b": np.array([[0.3]])}
        g, _ = clip_grad_norm(g0, 1.0)
        assert g is g0

    def test_post_clip_norm_bound(self, rng):
        for _ in range(50):
            g0 = {k: rng.standard_normal(rng.integers(1, 6)) * rng.uniform(0, 10) for k in "abc"}
            m = rng.uniform(0.01, 5)
            g, _ = clip_grad_norm(g0, m)
            assert np.sqrt(sum((v**2).sum() for v in g.values())) <= m + 1e-9

    def test_bad_max(self):
        with pytest.raises(ParameterError):
            clip_grad_norm({"a": np.ones(1)}, 0.0)


class TestEmaAndDecay:
    def test_rate_zero_tracks_params(self):
        p = param([1.0, 2.0])
        ema = EmaState.from_params(p, 0.0)
        p["w"].data[:] = [5.0, 6.0]
        ema_update(ema, p)
        np.testing.assert_array_equal(ema.shadow["w"], [5.0, 6.0])

    def test_geometric_gap(self, f64):
        p = param([0.0])
        ema = EmaState.from_params(p, 0.9)
        p["w"].data[:] = 1.0
        for k in range(1, 30):
            ema_update(ema, p)
            assert 1.0 - ema.shadow["w"][0] == pytest.approx(0.9**k, rel=1e-12)

    def test_default_rate_and_range(self):
        assert DecoderTrainConfig().ema_rate == 0.9999
        with pytest.raises(ParameterError):
            EmaState.from_params(param([0.0]), 1.0)

    def test_linear_decay(self):
        assert lr_linear_decay(3e-4, 0, 100) == 3e-4
        assert lr_linear_decay(3e-4, 100, 100) == 0.0
        assert lr_linear_decay(3e-4, 50, 100) == pytest.approx(1.5e-4)
        with pytest.raises(ParameterError):
            lr_linear_decay(1.0, 101, 100)


def toy_setup(n=64):
    ds = make_dataset("gaussians", n, seed=0)
    model = MLPEps(MLPConfig(data_dim=2, cond_dim=ds.cond.shape[1], hidden=16, depth=2, time_dim=8), seed=0)
    return ds, model


class RecordingModel:
    """Delegates to a real model and keeps every conditioning batch it sees."""

    def __init__(self, inner):
        self.inner, self.seen = inner, []

    def parameters(self):
        return self.inner.parameters()

    def __call__(self, x, t, cond=None, **kw):
        self.seen.append(np.array(cond, copy=True))
        return self.inner(x, t, cond, **kw)


class TestDecoderLoop:
    def test_drop_all_means_unconditional(self):
        ds, model = toy_setup()
        rec = RecordingModel(model)
        res = train_decoder(rec, cosine_schedule(20), ds, DecoderTrainConfig(iterations=5, batch_size=8, drop_prob=1.0))
        assert all(not np.any(c) for c in rec.seen)
        assert res.dropped == res.draws == 40

    def test_loss_log_deterministic(self, f64):
        logs = []
        for _ in range(2):
            ds, model = toy_setup()
            res = train_decoder(model, cosine_schedule(20), ds, DecoderTrainConfig(iterations=15, batch_size=8, seed=3))
            logs.append(res.loss_log)
        assert logs[0] == logs[1]
        assert all(np.isfinite(r["total"]) for r in logs[0])

    def test_drop_fraction(self):
        ds, model = toy_setup()
        res = train_decoder(model, cosine_schedule(10), ds, DecoderTrainConfig(iterations=10_000, batch_size=1, lr=1e-4))
        p = 0.2
        se = np.sqrt(p * (1 - p) / res.draws)
        assert abs(res.dropped / res.draws - p) < 3 * se

    def test_empty_dataset(self):
        ds, model = toy_setup()
        ds.x, ds.cond = ds.x[:0], ds.cond[:0]
        with pytest.raises(ConfigError):
            train_decoder(model, cosine_schedule(10), ds, DecoderTrainConfig(iterations=1))

    def test_run_dir_outputs(self, tmp_path):
        ds, model = toy_setup()
        train_decoder(model, cosine_schedule(10), ds, DecoderTrainConfig(iterations=4, batch_size=4, checkpoint_every=2), run_dir=tmp_path)
        assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["step_000002.ckpt", "step_000004.ckpt"]
        assert (tmp_path / "metrics" / "loss.csv").read_text().count("\n") == 5


class TestTranslatorLoop:
    def test_linear_map_is_learned(self, f64):
        yt, yi, _ = linear_pairs(2000, 16, seed=0)
        m = TranslatorMLP(TranslatorConfig(width=16, layers=2, dropout=0.0), seed=0)
        res = train_translator(m, yt, yi, TranslatorTrainConfig(epochs=120, val_fraction=0.1))
        assert res.best_val_mse < 1e-3
        assert res.best_val_mse < 0.01 * res.identity_mse

    def test_zero_epochs_returns_initialisation(self, rng):
        yt, yi, _ = linear_pairs(100, 8, seed=1)
        m = TranslatorMLP(TranslatorConfig(width=8, layers=1), seed=2)
        before = m.state_dict()
        res = train_translator(m, yt, yi, TranslatorTrainConfig(epochs=0))
        assert res.best_epoch == 0
        for k, v in before.items():
            np.testing.assert_array_equal(res.params[k], v)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deskdiff import guidance as gd
from deskdiff.errors import ParameterError, ShapeError


def sort_percentile(row, p):
    """Brute-force oracle: full sort, then linear interpolation at h = (n-1) p / 100."""
    v = sorted(float(a) for a in row)
    h = (len(v) - 1) * p / 100.0
    lo = int(h)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (h - lo) * (v[hi] - v[lo])


def oracle_dynamic(x, p):
    out = np.empty_like(x)
    for i, row in enumerate(x.reshape(len(x), -1)):
        s = max(1.0, sort_percentile(np.abs(row), p))
        out.reshape(len(x), -1)[i] = np.clip(row, -s, s) / s
    return out


class TestClassifierFree:
    def test_unit_and_zero_scale(self, rng):
        c, u = rng.standard_normal((2, 4, 3))
        np.testing.assert_array_equal(gd.classifier_free(c, u, 1.0), c)
        np.testing.assert_array_equal(gd.classifier_free(c, u, 0.0), u)

    def test_scalar_example(self):
        assert gd.classifier_free(np.array(2.0), np.array(1.0), 6.0) == 7.0

    def test_affine(self, f64, rng):
        c, u = rng.standard_normal((2, 10))
        np.testing.assert_allclose(gd.classifier_free(c, u, 3.3) - u, 3.3 * (c - u), atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            gd.classifier_free(np.zeros(2), np.zeros(3), 2.0)


class TestClassifierGuidance:
    def test_identities(self, rng):
        m, v, g = rng.standard_normal(5), rng.uniform(0.1, 1, 5), rng.standard_normal(5)
        np.testing.assert_array_equal(gd.classifier_guided_mean(m, v, g, 0.0), m)
        np.testing.assert_array_equal(gd.classifier_guided_mean(m, v, np.zeros(5), 2.0), m)

    def test_hand_value(self):
        assert gd.classifier_guided_mean(np.array(0.0), np.array(0.5), np.array(2.0), 3.0) == 3.0


class TestImageGuide:
    def test_zero_scale_identity(self, rng):
        x, z = rng.standard_normal((2, 3, 4, 4))
        np.testing.assert_array_equal(gd.image_guide(x, z, 0.0, 50, 100), x)

    def test_total_pull_at_T(self, rng):
        x, z = rng.standard_normal((2, 3, 4, 4))
        np.testing.assert_array_equal(gd.image_guide(x, z, 1.0, 100, 100, "linear"), z)

    def test_thousand_step_example(self):
        assert gd.image_guide(np.zeros(1), np.ones(1), 0.005, 500, 1000)[0] == pytest.approx(0.0025)

    @pytest.mark.parametrize("decay", gd.DECAYS)
    def test_contraction(self, f64, rng, decay):
        x, z = rng.standard_normal((2, 20))
        for t in (1, 40, 100):
            w = 0.6
            d = gd.decay_factor(t, 100, decay)
            out = gd.image_guide(x, z, w, t, 100, decay)
            np.testing.assert_allclose(np.abs(out - z), (1 - w * d) * np.abs(x - z), atol=1e-14)

    def test_broadcast_base_over_batch(self, rng):
        x = rng.standard_normal((5, 3, 2, 2))
        z = rng.standard_normal((3, 2, 2))
        assert gd.image_guide(x, z, 0.5, 10, 10).shape == x.shape

    def test_errors(self):
        with pytest.raises(ShapeError):
            gd.image_guide(np.zeros((2, 3)), np.zeros(4), 0.1, 1, 10)
        with pytest.raises(ParameterError):
            gd.image_guide(np.zeros(3), np.zeros(3), -0.1, 1, 10)
        with pytest.raises(ParameterError):
            gd.decay_factor(1, 10, "exponential")


class TestThresholds:
    def test_static(self):
        np.testing.assert_array_equal(gd.static_threshold(np.array([0.3, 1.7, -3.0])), [0.3, 1.0, -1.0])

    def test_dynamic_identity_in_range(self, rng):
        x = rng.uniform(-1, 1, (4, 50))
        for p in (1.0, 50.0, 99.5):
            np.testing.assert_array_equal(gd.dynamic_threshold(x, p), x)

    def test_two_element_example(self):
        # with the interpolation rule, the 99.5th percentile of [0, 2] is 1.99 rather than exactly 2;
        # the clamp then maps the output to [0, 1] just the same
        out = gd.dynamic_threshold(np.array([[0.0, 2.0]]), 99.5)
        np.testing.assert_allclose(out, [[0.0, 1.0]])
        assert sort_percentile([0.0, 2.0], 99.5) == pytest.approx(1.99)

    def test_outliers_map_to_unit(self):
        r = np.random.default_rng(4)
        x = r.uniform(-1, 1, 1000)
        idx = r.choice(1000, 4, replace=False)
        x[idx] = [5.0, -5.0, 5.0, -5.0]
        out = gd.dynamic_threshold(x[None], 99.5)[0]
        np.testing.assert_array_equal(np.abs(out[idx]), 1.0)
        np.testing.assert_allclose(out, oracle_dynamic(x[None], 99.5)[0], rtol=0, atol=0)

    def test_percentile_vs_sort_oracle(self, rng):
        vals = rng.standard_normal((7, 33))
        for p in (0.1, 37.0, 99.5):
            np.testing.assert_array_equal(gd.sample_percentile(vals, p), [sort_percentile(r, p) for r in vals])

    def test_bad_percentile(self):
        with pytest.raises(ParameterError):
            gd.dynamic_threshold(np.zeros((1, 3)), 100.0)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 40)), elements=st.floats(-20, 20)),
    st.floats(0.5, 99.9),
)
def test_dynamic_threshold_properties(x, p):
    out = gd.dynamic_threshold(x, p)
    assert np.all(np.abs(out) <= 1.0)
    assert np.all(np.sign(out) == np.sign(x))
    for row_in, row_out in zip(x, out):
        order = np.argsort(row_in, kind="stable")
        assert np.all(np.diff(row_out[order]) >= 0)
    np.testing.assert_array_equal(out, oracle_dynamic(x, p))


class TestConfig:
    def test_validation(self):
        with pytest.raises(ParameterError):
            gd.GuidanceConfig(cfg_scale=-1)
        with pytest.raises(ParameterError):
            gd.GuidanceConfig(threshold="soft")
        with pytest.raises(ParameterError):
            gd.GuidanceConfig(classifier_scale=1.0)
        with pytest.raises(ParameterError):
            gd.ImageGuide(np.zeros(2), 0.1, "step")
        assert gd.GuidanceConfig().percentile == 99.5

import numpy as np
import pytest
from scipy import linalg

from deskdiff import metrics as mt
from deskdiff.data import render_sprite
from deskdiff.errors import ParameterError


def stats(mean, cov, n=10):
    return mt.DistributionStats(np.atleast_1d(np.asarray(mean, float)), np.atleast_2d(np.asarray(cov, float)), n)


def fid_by_sqrtm(a, b):
    """Oracle: principal square root of the (non-symmetric) product via Schur decomposition."""
    root = linalg.sqrtm(a.cov @ b.cov).real
    d = a.mean - b.mean
    return float(d @ d + np.trace(a.cov + b.cov - 2 * root))


class TestFeatureStats:
    def test_two_points(self):
        s = mt.feature_stats([[0.0, 0.0], [2.0, 0.0]])
        np.testing.assert_array_equal(s.mean, [1.0, 0.0])
        np.testing.assert_array_equal(s.cov, [[2.0, 0.0], [0.0, 0.0]])

    def test_duplicated_data(self, rng):
        x = rng.standard_normal((30, 3))
        a, b = mt.feature_stats(x), mt.feature_stats(np.concatenate([x, x]))
        np.testing.assert_allclose(a.mean, b.mean, atol=1e-15)
        # ddof=1 differs by the factor (2n - 1) / (2n - 2) after duplication, so compare the ML form
        np.testing.assert_allclose(a.cov * 29 / 30, b.cov * 59 / 60, atol=1e-14)

    def test_affine_map(self, rng):
        x = rng.standard_normal((200, 4))
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal(3)
        s, t = mt.feature_stats(x), mt.feature_stats(x @ a.T + b)
        np.testing.assert_allclose(t.mean, a @ s.mean + b, atol=1e-10)
        np.testing.assert_allclose(t.cov, a @ s.cov @ a.T, atol=1e-10)
        np.testing.assert_array_equal(t.cov, t.cov.T)

    def test_too_few(self):
        with pytest.raises(ParameterError):
            mt.feature_stats(np.zeros((1, 3)))


class TestFid:
    def test_one_dimensional_cases(self):
        assert mt.fid(stats(0, 1), stats(0, 1)) == 0.0
        assert abs(mt.fid(stats(0, 1), stats(1, 1)) - 1.0) < 1e-9
        assert abs(mt.fid(stats(0, 1), stats(0, 4)) - 1.0) < 1e-9

    def test_self_distance_zero(self, rng):
        for _ in range(10):
            s = mt.feature_stats(rng.standard_normal((50, 6)) @ rng.standard_normal((6, 6)))
            assert mt.fid(s, s) < 1e-9

    def test_matches_sqrtm_oracle(self, rng):
        for _ in range(10):
            a = mt.feature_stats(rng.standard_normal((40, 5)) @ rng.standard_normal((5, 5)))
            b = mt.feature_stats(rng.standard_normal((40, 5)) * rng.uniform(0.5, 2, 5) + 1)
            assert mt.fid(a, b) == pytest.approx(fid_by_sqrtm(a, b), rel=1e-8, abs=1e-9)

    def test_symmetry_and_scaling(self, rng):
        x = rng.standard_normal((80, 4))
        y = rng.standard_normal((80, 4)) * 1.5 + 0.3
        a, b = mt.feature_stats(x), mt.feature_stats(y)
        assert abs(mt.fid(a, b) - mt.fid(b, a)) < 1e-8
        c = 2.7
        scaled = mt.fid(mt.feature_stats(c * x), mt.feature_stats(c * y))
        assert scaled == pytest.approx(c**2 * mt.fid(a, b), rel=1e-8)

    def test_rank_deficient_covariance(self, rng):
        x = rng.standard_normal((20, 1)) @ np.ones((1, 3))
        s = mt.feature_stats(x)
        assert mt.fid(s, s) < 1e-9

    def test_dimension_mismatch(self):
        with pytest.raises(ParameterError):
            mt.fid(stats([0, 0], np.eye(2)), stats(0, 1))


class TestExtractor:
    def test_deterministic(self, rng):
        x = rng.standard_normal((5, 3, 16, 16))
        f = mt.toy_feature_extractor(x)
        assert f.shape == (5, mt.FEATURE_DIM)
        np.testing.assert_array_equal(f, mt.toy_feature_extractor(x))

    def test_identical_sets(self, rng):
        x = rng.standard_normal((40, 2))
        assert mt.fid_from_samples(x, x) == 0.0

    def test_class_separation(self):
        r = np.random.default_rng(0)
        reds = np.stack([render_sprite("red", "square", r) for _ in range(200)])
        blues = np.stack([render_sprite("blue", "circle", r) for _ in range(100)])
        within = mt.fid_from_samples(reds[:100], reds[100:])
        across = mt.fid_from_samples(reds[:100], blues)
        assert across >= 5 * within


def test_intra_fid_sees_label_swaps(rng):
    a = rng.standard_normal((60, 3))
    b = rng.standard_normal((60, 3)) + 4
    feats = np.concatenate([a, b])
    labels = np.array(["a"] * 60 + ["b"] * 60)
    same, per = mt.intra_fid(feats, labels, feats, labels)
    assert same < 1e-9 and set(per) == {"a", "b"}
    swapped, _ = mt.intra_fid(feats, labels, feats, labels[::-1])
    # the pooled statistics are unchanged by the swap
    assert mt.fid(mt.feature_stats(feats), mt.feature_stats(feats)) < 1e-9
    assert swapped > 10
    with pytest.raises(ParameterError):
        mt.intra_fid(feats, labels, feats[:1], labels[:1])


def test_report_files(tmp_path):
    mt.write_report(tmp_path, [{"variant": "full", "fid": 1.5}])
    assert (tmp_path / "fid.csv").read_text().splitlines()[0] == "variant,fid"
    assert '"fid": 1.5' in (tmp_path / "fid.json").read_text()

"""Fréchet distance between Gaussian fits of feature statistics, and a toy feature extractor."""

from dataclasses import dataclass

import numpy as np

from . import io
from .errors import ParameterError

FEATURE_DIM = 32
FEATURE_SEED = 1234


@dataclass
class DistributionStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def dim(self):
        return self.mean.shape[0]


def feature_stats(features) -> DistributionStats:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] < 2:
        raise ParameterError(f"need at least 2 feature vectors, got {f.shape[0]}")
    cov = np.cov(f, rowvar=False, ddof=1).reshape(f.shape[1], f.shape[1])
    return DistributionStats(f.mean(axis=0), 0.5 * (cov + cov.T), f.shape[0])


def _psd_sqrt(a):
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    w = np.where(w < 1e-8 * max(w.max(initial=0.0), 0.0), 0.0, w)
    return (v * np.sqrt(w)) @ v.T, w


def trace_sqrt_product(cov_r, cov_g):
    """tr((S_r S_g)^{1/2}) via the symmetric form S_r^{1/2} S_g S_r^{1/2}."""
    root_r, _ = _psd_sqrt(cov_r)
    inner = root_r @ cov_g @ root_r
    # eigenvalues here are squares of the covariance scale, so a relative clip
    # would discard real mass; only round-off negatives are zeroed
    w = np.clip(np.linalg.eigvalsh(0.5 * (inner + inner.T)), 0.0, None)
    return float(np.sqrt(w).sum())


def fid(r: DistributionStats, g: DistributionStats) -> float:
    if r.dim != g.dim:
        raise ParameterError(f"feature dimensions differ: {r.dim} vs {g.dim}")
    d = r.mean - g.mean
    value = float(d @ d) + float(np.trace(r.cov) + np.trace(g.cov)) - 2.0 * trace_sqrt_product(r.cov, g.cov)
    return max(value, 0.0)


def _projection(in_dim, out_dim=FEATURE_DIM, seed=FEATURE_SEED):
    rng = np.random.default_rng([seed, in_dim, out_dim])
    return rng.standard_normal((in_dim, out_dim)) * (2.0 / np.sqrt(in_dim))


def toy_feature_extractor(samples, dim=FEATURE_DIM, seed=FEATURE_SEED):
    """Fixed seeded random projection followed by tanh; works for images and points alike."""
    x = np.asarray(samples, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    return np.tanh(flat @ _projection(flat.shape[1], dim, seed))


def fid_from_samples(real, generated):
    return fid(feature_stats(toy_feature_extractor(real)), feature_stats(toy_feature_extractor(generated)))


def intra_fid(real_feats, real_labels, gen_feats, gen_labels):
    """Mean over labels of the FID between same-label real and generated features.

    Sensitive to samples landing in the wrong class, which the pooled FID
    cannot see when the wrong classes still cover the real marginal.
    Returns ``(mean, {label: fid})``.
    """
    real_labels = np.asarray(real_labels)
    gen_labels = np.asarray(gen_labels)
    per = {}
    for lab in sorted(set(gen_labels.tolist())):
        r = real_feats[real_labels == lab]
        g = gen_feats[gen_labels == lab]
        if len(r) < 2 or len(g) < 2:
            raise ParameterError(f"label {lab!r} needs at least 2 real and 2 generated samples")
        per[lab] = fid(feature_stats(r), feature_stats(g))
    return float(np.mean(list(per.values()))), per


def write_report(out_dir, rows, name="fid"):
    """``rows`` is a list of dicts; writes ``<name>.csv`` and ``<name>.json`` into ``out_dir``."""
    keys = list(rows[0]) if rows else []
    io.write_csv(f"{out_dir}/{name}.csv", keys, ([r[k] for k in keys] for r in rows))
    io.write_json(f"{out_dir}/{name}.json", {"rows": rows})

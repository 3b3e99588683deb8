"""Synthetic embeddings, toy datasets and the toy classifier used as an evaluation oracle."""

from dataclasses import dataclass, field

import numpy as np

from . import io
from .errors import ConfigError, ParameterError, VocabularyError

COLORS = ("red", "green", "blue")
SHAPES = ("square", "circle", "triangle")
GAUSSIAN_CLASSES = ("alpha", "beta")
MOON_CLASSES = ("upper", "lower")
VOCABULARY = COLORS + SHAPES + GAUSSIAN_CLASSES + MOON_CLASSES

SPRITE_SIZE = 16
_RGB = {"red": (1.0, -1.0, -1.0), "green": (-1.0, 1.0, -1.0), "blue": (-1.0, -1.0, 1.0)}

# two-Gaussian toy task
GAUSSIAN_MEANS = {"alpha": np.array([-1.5, -0.75]), "beta": np.array([1.5, 0.75])}
GAUSSIAN_STD = 0.25


# ------------------------------------------------------------- embedder


def tokenize(caption):
    if caption is None:
        return []
    if isinstance(caption, str):
        return caption.replace(",", " ").lower().split()
    return [str(t).lower() for t in caption]


class SyntheticEmbedder:
    """Deterministic stand-in for paired text/image encoders.

    Each vocabulary token gets a seeded unit vector; a caption's concept
    vector is the sum of its token vectors, so concept arithmetic behaves
    like embedding arithmetic. Image embeddings are the concept plus small
    noise. Text embeddings live in a rotated frame,
    ``0.6 c + 0.8 Q c`` with ``Q`` a fixed random orthogonal matrix, plus
    noise: related to the image side (cosine about 0.6) but not
    interchangeable with it.
    """

    def __init__(self, width=64, seed=0, noise=0.1, vocabulary=VOCABULARY):
        if width < 2:
            raise ParameterError("embedding width must be >= 2")
        self.width = width
        self.seed = seed
        self.noise = noise
        self.vocabulary = tuple(vocabulary)
        rng = np.random.default_rng([seed, width])
        vecs = rng.standard_normal((len(self.vocabulary), width))
        self.tokens = {t: v / np.linalg.norm(v) for t, v in zip(self.vocabulary, vecs)}
        q, r = np.linalg.qr(rng.standard_normal((width, width)))
        self.rotation = q * np.sign(np.diag(r))

    def concept(self, caption):
        toks = tokenize(caption)
        unknown = [t for t in toks if t not in self.tokens]
        if unknown:
            raise VocabularyError(f"unknown token(s) {unknown}; known tokens: {', '.join(self.vocabulary)}")
        out = np.zeros(self.width)
        for t in toks:
            out += self.tokens[t]
        return out

    def _noise(self, rng, n):
        if rng is None or self.noise == 0:
            return np.zeros((n, self.width))
        return rng.standard_normal((n, self.width)) * (self.noise / np.sqrt(self.width))

    def image_embedding(self, captions, rng=None):
        c = np.stack([self.concept(cap) for cap in captions])
        return c + self._noise(rng, len(c))

    def text_embedding(self, captions, rng=None):
        c = np.stack([self.concept(cap) for cap in captions])
        return 0.6 * c + 0.8 * c @ self.rotation.T + self._noise(rng, len(c))


def embedding_algebra(op, e1, e2, coeff=0.5):
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise ParameterError(f"embedding widths differ: {e1.shape} vs {e2.shape}")
    if op == "average":
        return (e1 + e2) / 2.0
    if op == "difference":
        return e1 - e2
    if op == "lerp":
        if not 0.0 <= coeff <= 1.0:
            raise ParameterError(f"lerp coefficient must be in [0, 1], got {coeff}")
        return (1.0 - coeff) * e1 + coeff * e2
    raise ParameterError(f"unknown algebra op {op!r}; expected average, difference or lerp")


# -------------------------------------------------------------- sprites


def quantize(x):
    """Snap [-1, 1] values onto the 256-level grid."""
    return np.rint((np.clip(x, -1.0, 1.0) + 1.0) * 127.5) / 127.5 - 1.0


def _shape_mask(shape, cy, cx, r, size=SPRITE_SIZE):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= (r + 0.5) ** 2
    if shape == "triangle":
        # apex at the top, base at the bottom
        top, bottom = cy - r, cy + r
        frac = (yy - top) / (bottom - top)
        half = (r + 0.5) * frac
        return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half)
    raise VocabularyError(f"unknown shape {shape!r}; known shapes: {', '.join(SHAPES)}")


def render_sprite(color, shape, rng=None, size=SPRITE_SIZE):
    """One (3, size, size) sprite in [-1, 1]: a coloured shape on a black background."""
    if color not in _RGB:
        raise VocabularyError(f"unknown colour {color!r}; known colours: {', '.join(COLORS)}")
    if rng is None:
        r, cy, cx, gain = 5.0, size / 2, size / 2, 1.0
    else:
        r = rng.uniform(4.0, 6.0)
        cy = rng.uniform(r + 1.0, size - r - 1.0)
        cx = rng.uniform(r + 1.0, size - r - 1.0)
        gain = rng.uniform(0.8, 1.0)
    mask = _shape_mask(shape, cy, cx, r, size)
    img = np.full((3, size, size), -1.0)
    rgb = np.asarray(_RGB[color])
    fg = -1.0 + gain * (rgb + 1.0)
    img[:, mask] = fg[:, None]
    return quantize(img)


def sprite_classes():
    return [f"{c} {s}" for c in COLORS for s in SHAPES]


def _corner_mask(h, w):
    """Pixels within L1 distance min(h, w)//4 of a box corner."""
    k = max(1, min(h, w) // 4)
    i, j = np.mgrid[:h, :w]
    mask = np.zeros((h, w), dtype=bool)
    for ci, cj in ((0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)):
        mask |= (np.abs(i - ci) + np.abs(j - cj)) < k
    return mask


def classify_sprites(images):
    """Toy classifier: dominant colour of bright pixels, shape from how their bounding box fills.

    Triangles fill the top half of the box much less than the bottom half;
    squares fill the corners of the box, circles leave them empty.

    Returns captions like ``"red square"``; ``"none"`` when no foreground is found.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    out = []
    for img in images:
        bright = img.max(axis=0)
        fg = bright > 0.0
        if fg.sum() < 4:
            out.append("none")
            continue
        color = COLORS[int(np.argmax(img[:, fg].mean(axis=1)))]
        rows = np.nonzero(fg.sum(axis=1) >= 2)[0]
        cols = np.nonzero(fg.sum(axis=0) >= 2)[0]
        if len(rows) < 2 or len(cols) < 2:
            out.append("none")
            continue
        box = fg[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
        h, w = box.shape
        half = h // 2
        top, bottom = box[:half].mean(), box[-half:].mean()
        if top < 0.64 * bottom:
            shape = "triangle"
        elif box[_corner_mask(h, w)].mean() >= 0.45:
            shape = "square"
        else:
            shape = "circle"
        out.append(f"{color} {shape}")
    return out


def pad_to_square(image, fill=1.0):
    """Centre a (C, H, W) image on a square canvas filled with ``fill`` (white at 1.0)."""
    image = np.asarray(image)
    c, h, w = image.shape
    side = max(h, w)
    out = np.full((c, side, side), fill, dtype=image.dtype)
    y, x = (side - h) // 2, (side - w) // 2
    out[:, y : y + h, x : x + w] = image
    return out


# ------------------------------------------------------------- datasets


@dataclass
class ToyDataset:
    kind: str
    x: np.ndarray
    labels: list
    cond: np.ndarray
    text: np.ndarray
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.x)

    @property
    def classes(self):
        return sorted(set(self.labels))

    def save(self, path):
        names = self.classes
        ids = np.array([names.index(l) for l in self.labels], dtype=np.int64)
        meta = {
            "kind": "dataset",
            "dataset_kind": self.kind,
            "seed": self.seed,
            "count": len(self),
            "classes": names,
            "value_range": [float(self.x.min()), float(self.x.max())] if len(self) else [0.0, 0.0],
            "sample_shape": list(self.x.shape[1:]),
            "embedding_width": int(self.cond.shape[1]),
        }
        meta.update(self.meta)
        io.save_container(path, {"x": self.x, "cond": self.cond, "text": self.text, "label_id": ids}, meta)

    @classmethod
    def load(cls, path):
        t, meta = io.load_container(path)
        if meta.get("kind") != "dataset":
            raise ConfigError(f"{path} is not a dataset file")
        labels = [meta["classes"][i] for i in t["label_id"]]
        extra = {k: v for k, v in meta.items() if k in ("embedder",)}
        return cls(meta["dataset_kind"], t["x"], labels, t["cond"], t["text"], meta["seed"], extra)


def _labels_for(kind, n, rng):
    if kind == "sprites":
        classes = sprite_classes()
    elif kind == "gaussians":
        classes = list(GAUSSIAN_CLASSES)
    elif kind == "moons":
        classes = list(MOON_CLASSES)
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}; expected sprites, gaussians or moons")
    return [classes[i] for i in rng.integers(0, len(classes), n)]


def sample_gaussians(labels, rng):
    means = np.stack([GAUSSIAN_MEANS[l] for l in labels])
    return means + GAUSSIAN_STD * rng.standard_normal(means.shape)


def sample_moons(labels, rng, noise=0.08):
    theta = rng.uniform(0.0, np.pi, len(labels))
    upper = np.array([l == "upper" for l in labels])
    x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
    pts = np.stack([x - 0.5, y - 0.25], axis=1)
    return pts + noise * rng.standard_normal(pts.shape)


def make_dataset(kind, count, seed=0, embedder: SyntheticEmbedder = None):
    """Generate a labelled toy dataset with paired (image, text) embeddings."""
    if count < 0:
        raise ConfigError("count must be >= 0")
    embedder = embedder or SyntheticEmbedder()
    rng = np.random.default_rng([seed, 101])
    labels = _labels_for(kind, count, rng)
    if kind == "sprites":
        x = np.stack([render_sprite(*l.split(), rng=rng) for l in labels]) if count else np.zeros((0, 3, 16, 16))
    elif kind == "gaussians":
        x = sample_gaussians(labels, rng)
    else:
        x = sample_moons(labels, rng)
    if count:
        cond = embedder.image_embedding(labels, rng)
        text = embedder.text_embedding(labels, rng)
    else:
        cond = text = np.zeros((0, embedder.width))
    meta = {"embedder": {"width": embedder.width, "seed": embedder.seed, "noise": embedder.noise}}
    return ToyDataset(kind, x, labels, cond, text, seed, meta)


def linear_pairs(count, width, seed=0):
    """Pairs with an exact linear relation ``y_i = A y_t`` (translator oracle set)."""
    rng = np.random.default_rng([seed, 202])
    a = rng.standard_normal((width, width)) / np.sqrt(width)
    y_t = rng.standard_normal((count, width))
    return y_t, y_t @ a.T, a


def nearest_mean_labels(points, means: dict):
    names = list(means)
    centers = np.stack([means[n] for n in names])
    d = ((np.asarray(points)[:, None, :] - centers[None]) ** 2).sum(-1)
    return [names[i] for i in d.argmin(axis=1)]

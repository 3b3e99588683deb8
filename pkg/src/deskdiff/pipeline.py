"""End-to-end composition: caption -> text embedding -> translator -> image embedding -> decoder.

Conditioning vectors fed to the decoder are image embeddings standardised
with one set of statistics per run; the translator regresses directly into
that standardised space, so its output is a valid decoder input. The null
embedding is the zero vector of that space.
"""

import logging
import os
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data, io, metrics
from .errors import ConfigError, FormatError
from .guidance import GuidanceConfig, ImageGuide
from .models import MLPConfig, MLPEps, TinyUNet, TinyUNetConfig, TranslatorConfig, TranslatorMLP
from .sampler import SampleRequest, ddpm_sample, model_sample_shape
from .schedule import make_schedule
from .train import (
    DecoderTrainConfig,
    Standardizer,
    TranslatorTrainConfig,
    train_decoder,
    train_translator,
)

log = logging.getLogger(__name__)

# small enough to train on one core in minutes
SPRITE_UNET = TinyUNetConfig(
    in_channels=3,
    image_size=16,
    base_channels=16,
    channel_mult=(1, 2, 2),
    num_res_blocks=1,
    attention_resolutions=(4,),
    head_channels=16,
    dropout=0.0,
    cond_dim=64,
    norm_groups=8,
)


def stats_tensors(prefix, st: Standardizer):
    return {f"{prefix}/mean": st.mean, f"{prefix}/std": st.std}


def stats_from(tensors, prefix):
    try:
        return Standardizer(tensors[f"{prefix}/mean"], tensors[f"{prefix}/std"])
    except KeyError:
        raise FormatError(f"checkpoint lacks {prefix} standardisation statistics") from None


@dataclass
class Pipeline:
    decoder: object
    schedule: object
    embedder: data.SyntheticEmbedder
    image_stats: Standardizer
    text_stats: Standardizer = None
    translator: object = None

    # -- conditioning paths ---------------------------------------------
    def image_condition(self, captions):
        """Decoder-only path: the caption's own (noise-free) image embedding."""
        return self.image_stats.apply(self.embedder.image_embedding(captions))

    def text_condition(self, captions):
        """No-translator path: the text embedding fed straight to the decoder."""
        return self.text_stats.apply(self.embedder.text_embedding(captions))

    def translated_condition(self, captions):
        from .autodiff.tensor import no_grad

        if self.translator is None:
            raise ConfigError("this pipeline has no translator checkpoint")
        with no_grad():
            return self.translator(self.text_stats.apply(self.embedder.text_embedding(captions))).data.astype(
                np.float64
            )

    def condition(self, caption, variant="full"):
        """One conditioning row for a caption; the empty caption is the null embedding."""
        if not data.tokenize(caption):
            return np.zeros(self.decoder.cond_dim)
        if variant == "full":
            return self.translated_condition([caption])[0]
        if variant == "decoder_only":
            return self.image_condition([caption])[0]
        if variant == "no_translator":
            return self.text_condition([caption])[0]
        raise ConfigError(f"unknown pipeline variant {variant!r}")

    # -- sampling ---------------------------------------------------------
    def sample(self, cond, count, seed=0, guidance=None, trace=False):
        req = SampleRequest(count, model_sample_shape(self.decoder), cond, guidance or GuidanceConfig(), seed, trace)
        return ddpm_sample(self.decoder, self.schedule, req)

    def generate(self, caption, count, seed=0, guidance=None, variant="full", trace=False):
        return self.sample(self.condition(caption, variant), count, seed, guidance, trace)

    # -- persistence -------------------------------------------------------
    @classmethod
    def load(cls, decoder_path, translator_path=None, use_ema=True):
        decoder, sched, tensors, meta = io.load_checkpoint(decoder_path)
        if sched is None:
            raise FormatError(f"{decoder_path}: decoder checkpoint carries no schedule")
        if use_ema:
            ema = {k[len("ema/") :]: v for k, v in tensors.items() if k.startswith("ema/")}
            if ema:
                decoder.load_state_dict(ema)
        emb_cfg = meta.get("embedder", {})
        embedder = data.SyntheticEmbedder(**emb_cfg) if emb_cfg else data.SyntheticEmbedder(decoder.cond_dim)
        image_stats = stats_from(tensors, "stats/image")
        text_stats = stats_from(tensors, "stats/text") if "stats/text/mean" in tensors else None
        translator = None
        if translator_path:
            translator, _, t_tensors, _ = io.load_checkpoint(translator_path)
            text_stats = stats_from(t_tensors, "stats/text")
        return cls(decoder, sched, embedder, image_stats, text_stats, translator)


# ------------------------------------------------------------- training


@dataclass
class DecoderRunConfig:
    dataset: str = "sprites"
    count: int = 4000
    data_seed: int = 0
    embed_width: int = 64
    embed_noise: float = 0.1
    model: str = "unet"
    T: int = 100
    schedule: str = "cosine"
    train: DecoderTrainConfig = field(default_factory=DecoderTrainConfig)
    unet: TinyUNetConfig = field(default_factory=lambda: SPRITE_UNET)
    mlp: MLPConfig = field(default_factory=MLPConfig)


def build_decoder(cfg: DecoderRunConfig, seed):
    if cfg.model == "unet":
        ucfg = TinyUNetConfig(**{**asdict(cfg.unet), "cond_dim": cfg.embed_width})
        return TinyUNet(ucfg, seed)
    if cfg.model == "mlp":
        mcfg = MLPConfig(**{**asdict(cfg.mlp), "cond_dim": cfg.embed_width})
        return MLPEps(mcfg, seed)
    raise ConfigError(f"unknown decoder model {cfg.model!r}; expected unet or mlp")


def train_decoder_run(cfg: DecoderRunConfig, run_dir, dataset=None):
    """Train a decoder and write ``checkpoints/decoder.ckpt`` (final, with EMA and stats)."""
    embedder = data.SyntheticEmbedder(cfg.embed_width, cfg.data_seed, cfg.embed_noise)
    if dataset is None:
        dataset = data.make_dataset(cfg.dataset, cfg.count, cfg.data_seed, embedder)
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    image_stats = Standardizer.fit(dataset.cond)
    text_stats = Standardizer.fit(dataset.text)
    std_ds = data.ToyDataset(dataset.kind, dataset.x, dataset.labels, image_stats.apply(dataset.cond), dataset.text, dataset.seed)
    sched = make_schedule(cfg.schedule, cfg.T)
    model = build_decoder(cfg, cfg.train.seed)
    extras = {**stats_tensors("stats/image", image_stats), **stats_tensors("stats/text", text_stats)}
    meta = {"embedder": {"width": embedder.width, "seed": embedder.seed, "noise": embedder.noise}, "dataset_kind": dataset.kind}
    result = train_decoder(model, sched, std_ds, cfg.train, run_dir, extras, meta)
    final = os.path.join(run_dir, "checkpoints", f"step_{cfg.train.iterations:06d}.ckpt")
    link = os.path.join(run_dir, "checkpoints", "decoder.ckpt")
    if os.path.exists(final):
        with open(final, "rb") as src, open(link, "wb") as dst:
            dst.write(src.read())
    return result, link


def train_translator_run(decoder_path, tcfg: TranslatorConfig, train_cfg: TranslatorTrainConfig, run_dir, dataset):
    """Fit the translator on (text, image) embedding pairs, sharing the decoder's image statistics."""
    _, _, tensors, _ = io.load_checkpoint(decoder_path)
    image_stats = stats_from(tensors, "stats/image")
    text_stats = stats_from(tensors, "stats/text")
    model = TranslatorMLP(tcfg, train_cfg.seed)
    res = train_translator(model, dataset.text, dataset.cond, train_cfg, text_stats, image_stats)
    path = os.path.join(run_dir, "checkpoints", "translator.ckpt")
    extras = {**stats_tensors("stats/text", text_stats), **stats_tensors("stats/image", image_stats)}
    io.save_checkpoint(path, model, None, extras, {"best_epoch": res.best_epoch, "epochs_run": res.epochs_run})
    io.write_csv(
        os.path.join(run_dir, "metrics", "translator.csv"),
        ["epoch", "train_mse", "val_mse"],
        ((h["epoch"], h["train_mse"], h["val_mse"]) for h in res.history),
    )
    return res, path


# ------------------------------------------------------------ experiments


def agreement(images, caption):
    labels = data.classify_sprites(images)
    return float(np.mean([l == caption for l in labels])), labels


def generate_report(pipe: Pipeline, caption, count, seed, guidance=None, variant="full", out_dir=None):
    res = pipe.generate(caption, count, seed, guidance, variant, trace=out_dir is not None)
    report = {"caption": caption, "count": count, "seed": seed, "variant": variant}
    if pipe.decoder.kind == "unet":
        rate, labels = agreement(res.samples, caption)
        report["agreement"] = rate
        report["labels"] = dict(Counter(labels))
    if out_dir:
        save_samples(out_dir, "generate", res.samples)
        save_trace(out_dir, res.trace)
    return res.samples, report


def save_samples(out_dir, name, samples):
    sdir = os.path.join(out_dir, "samples")
    io.save_container(os.path.join(sdir, f"{name}.ddf"), {"samples": samples}, {"kind": "samples"})
    if samples.ndim == 4:
        io.save_png(os.path.join(sdir, f"{name}.png"), samples, scale=4)
    else:
        io.save_points_csv(os.path.join(sdir, f"{name}.csv"), samples)


def save_trace(out_dir, trace):
    if not trace:
        return
    steps = sorted(trace, reverse=True)
    first = trace[steps[0]]
    if first.ndim == 4:
        # one column per recorded timestep, one row per sample (first 8)
        k = min(8, first.shape[0])
        tiles = np.stack([np.clip(trace[s][:k], -1, 1) for s in steps], axis=1).reshape((-1,) + first.shape[1:])
        io.save_png(os.path.join(out_dir, "samples", "trace.png"), tiles, cols=len(steps), scale=4)
    io.save_container(
        os.path.join(out_dir, "samples", "trace.ddf"),
        {f"t{s:05d}": trace[s] for s in steps},
        {"kind": "trace", "timesteps": steps},
    )


def embedding_algebra_demo(pipe: Pipeline, op, a, b, coeff=0.5, c=None, count=16, seed=0, guidance=None):
    """Combine image embeddings of captions ``a`` and ``b`` (plus ``c`` for analogies) and decode.

    With ``c`` given, decodes ``a - b + c`` (an analogy such as red circle -
    blue circle + blue square) and compares with decoding the expected
    caption's own embedding by toy-classifier label agreement.
    """
    ea, eb = pipe.embedder.image_embedding([a])[0], pipe.embedder.image_embedding([b])[0]
    raw = data.embedding_algebra(op, ea, eb, coeff)
    if c is not None:
        raw = raw + pipe.embedder.image_embedding([c])[0]
    cond = pipe.image_stats.apply(raw)
    samples = pipe.sample(cond, count, seed, guidance).samples
    report = {"op": op, "a": a, "b": b, "c": c, "coeff": coeff, "count": count}
    if pipe.decoder.kind == "unet":
        labels = data.classify_sprites(samples)
        report["labels"] = dict(Counter(labels))
        if c is not None:
            expected = _analogy_caption(a, b, c)
            if expected:
                ref = pipe.sample(pipe.condition(expected, "decoder_only"), count, seed, guidance).samples
                ref_labels = data.classify_sprites(ref)
                report["expected"] = expected
                report["agreement_with_expected"] = float(np.mean([l == expected for l in labels]))
                report["label_agreement_with_reference"] = float(np.mean([x == y for x, y in zip(labels, ref_labels)]))
    return samples, report


def _analogy_caption(a, b, c):
    """Token multiset a - b + c as a caption, if it is a single well-formed concept."""
    cnt = Counter(data.tokenize(a))
    cnt.subtract(Counter(data.tokenize(b)))
    cnt.update(Counter(data.tokenize(c)))
    if any(v < 0 for v in cnt.values()):
        return None
    toks = [t for t, v in cnt.items() for _ in range(v)]
    colors = [t for t in toks if t in data.COLORS]
    shapes = [t for t in toks if t in data.SHAPES]
    if len(colors) == 1 and len(shapes) == 1 and len(toks) == 2:
        return f"{colors[0]} {shapes[0]}"
    return None


def image_guidance_experiment(
    pipe: Pipeline, base, caption, w, decay="linear", count=100, seed=0, guidance=None, variant="full", out_dir=None
):
    """Generate with and without image guidance toward ``base`` from the same seeds."""
    guidance = guidance or GuidanceConfig()
    plain = pipe.generate(caption, count, seed, guidance, variant)
    kw = {k: getattr(guidance, k) for k in ("cfg_scale", "classifier_scale", "classifier_grad", "threshold", "percentile", "threshold_target")}
    guided_cfg = GuidanceConfig(image_guide=ImageGuide(np.asarray(base), w, decay), **kw)
    guided = pipe.generate(caption, count, seed, guided_cfg, variant, trace=True)
    a0, _ = agreement(plain.samples, caption)
    a1, _ = agreement(guided.samples, caption)
    report = {
        "caption": caption,
        "scale": w,
        "decay": decay,
        "count": count,
        "seed": seed,
        "cfg_scale": guidance.cfg_scale,
        "agreement_without": a0,
        "agreement_with": a1,
        "gain_points": 100.0 * (a1 - a0),
    }
    if out_dir:
        save_samples(out_dir, "without_guidance", plain.samples)
        save_samples(out_dir, "with_guidance", guided.samples)
        pair = np.concatenate([plain.samples[:8], guided.samples[:8]])
        io.save_png(os.path.join(out_dir, "samples", "side_by_side.png"), pair, cols=8, scale=4)
        save_trace(out_dir, guided.trace)
        io.write_json(os.path.join(out_dir, "metrics", "guide_demo.json"), report)
    return plain.samples, guided.samples, report


VARIANTS = ("full", "decoder_only", "no_translator")


def fid_eval(pipe: Pipeline, real_x, real_labels, per_class, seed=0, guidance=None, out_dir=None):
    """Pooled and per-caption FID of each pipeline variant against labelled real data.

    Generates ``per_class`` samples for every caption present in ``real_labels``.
    """
    real_labels = list(real_labels)
    real_f = metrics.toy_feature_extractor(real_x)
    real_stats = metrics.feature_stats(real_f)
    captions = sorted(set(real_labels))
    rows = []
    for variant in VARIANTS:
        gen = np.concatenate([pipe.generate(cap, per_class, seed + k, guidance, variant).samples for k, cap in enumerate(captions)])
        expected = [c for c in captions for _ in range(per_class)]
        gen_f = metrics.toy_feature_extractor(gen)
        intra, _ = metrics.intra_fid(real_f, real_labels, gen_f, expected)
        row = {
            "variant": variant,
            "fid": metrics.fid(real_stats, metrics.feature_stats(gen_f)),
            "intra_fid": intra,
            "samples": int(len(gen)),
        }
        if gen.ndim == 4:
            row["label_accuracy"] = float(np.mean([a == b for a, b in zip(data.classify_sprites(gen), expected)]))
        rows.append(row)
    if out_dir:
        metrics.write_report(os.path.join(out_dir, "metrics"), rows)
    return rows

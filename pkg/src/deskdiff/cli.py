"""Command-line entry point.

Every command reads defaults, then an optional config file (JSON object or
INI-style ``key = value`` lines), then flag overrides, and writes into a run
directory holding ``config.json``, ``checkpoints/``, ``samples/``,
``metrics/`` and ``log/``. Failures print one line to stderr::

    error kind=<kind> msg="<json-escaped message>"
"""

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from . import backend, data, io
from .errors import ConfigError, DeskDiffError

log = logging.getLogger("deskdiff")


class UsageError(DeskDiffError):
    kind = "usage"


# ------------------------------------------------------------- schemas

COMMON = {"seed": 0, "precision": 32, "out": ""}
GUIDANCE = {
    "cfg_scale": 1.0,
    "image_guide": "",
    "guide_scale": 0.0,
    "decay": "linear",
    "threshold": "auto",
    "percentile": 99.5,
    "threshold_target": "x0",
}
UNET_KEYS = {
    "base_channels": 16,
    "channel_mult": "1,2,2",
    "num_res_blocks": 1,
    "attention_resolutions": "4",
    "head_channels": 16,
    "dropout": 0.0,
    "norm_groups": 8,
}

SCHEMAS = {
    "make-dataset": {"kind": "sprites", "count": 4000, "embed_width": 64, "embed_noise": 0.1},
    "train-decoder": {
        "dataset": "",
        "kind": "sprites",
        "count": 4000,
        "data_seed": 0,
        "embed_width": 64,
        "embed_noise": 0.1,
        "model": "unet",
        "T": 100,
        "schedule": "cosine",
        "steps": 5000,
        "batch_size": 16,
        "lr": 1e-3,
        "lr_decay": True,
        "drop_prob": 0.2,
        "lam": 0.001,
        "clip_norm": 1.0,
        "ema_rate": 0.995,
        "checkpoint_every": 1000,
        "flip": True,
        "hidden": 128,
        "depth": 3,
        "time_dim": 32,
        **UNET_KEYS,
    },
    "train-translator": {
        "decoder": "",
        "dataset": "",
        "count": 4000,
        "data_seed": 1,
        "layers": 4,
        "hidden_mult": 2,
        "dropout": 0.1,
        "steps": 60,
        "batch_size": 64,
        "lr": 1e-3,
        "weight_decay": 1e-4,
        "val_fraction": 0.05,
        "patience": 10,
    },
    "sample": {"decoder": "", "caption": "", "count": 16, "trace": False, "use_ema": True, **GUIDANCE},
    "generate": {
        "decoder": "",
        "translator": "",
        "caption": "red square",
        "count": 16,
        "variant": "full",
        "trace": True,
        **GUIDANCE,
    },
    "reconstruct": {"decoder": "", "dataset": "", "index": 0, "caption": "", "count": 8, **GUIDANCE},
    "algebra": {
        "decoder": "",
        "op": "lerp",
        "a": "red square",
        "b": "blue circle",
        "c": "",
        "coeff": 0.5,
        "count": 16,
        **GUIDANCE,
    },
    "guide-demo": {
        "decoder": "",
        "translator": "",
        "caption": "blue triangle",
        "count": 100,
        "variant": "full",
        **{**GUIDANCE, "guide_scale": 0.02, "decay": "linear"},
    },
    "eval-fid": {
        "decoder": "",
        "translator": "",
        "per_class": 20,
        "real_count": 900,
        "real_seed": 99,
        **GUIDANCE,
    },
    "grad-check": {"trials": 3, "threshold": 1e-4, "net_threshold": 1e-3, "networks": True},
}

def schema_for(command):
    return {**COMMON, **SCHEMAS[command]}


def _coerce(key, raw, default):
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (TypeError, ValueError):
        raise UsageError(f"{key}: expected {type(default).__name__}, got {raw!r}") from None
    return str(raw)


def read_config_file(path):
    with open(path) as fh:
        text = fh.read()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(obj, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return obj
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + text if not stripped.startswith("[") else text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: unreadable config ({exc})") from None
    out = {}
    for section in parser.sections():
        out.update(parser[section])
    return out


def resolve_config(command, file_cfg, overrides):
    schema = schema_for(command)
    merged = dict(schema)
    for source in (file_cfg, overrides):
        unknown = sorted(set(source) - set(schema))
        if unknown:
            raise UsageError(f"unknown key(s) {unknown} for {command}; valid keys: {', '.join(sorted(schema))}")
        for k, v in source.items():
            merged[k] = _coerce(k, v, schema[k])
    if merged["precision"] not in (32, 64):
        raise UsageError("precision must be 32 or 64")
    if not merged["out"]:
        merged["out"] = os.path.join("runs", command)
    return merged


# ------------------------------------------------------------ run dirs


def prepare_run_dir(cfg):
    out = cfg["out"]
    for sub in ("checkpoints", "samples", "metrics", "log"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)
    io.write_json(os.path.join(out, "config.json"), cfg)
    handler = logging.FileHandler(os.path.join(out, "log", "run.log"), mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("deskdiff").addHandler(handler)
    return out


def _require(cfg, key):
    if not cfg[key]:
        raise UsageError(f"missing required key {key!r}")
    return cfg[key]


def guidance_from(cfg, sample_shape=None):
    from .guidance import GuidanceConfig, ImageGuide

    guide = None
    if cfg["image_guide"]:
        base = load_base_image(cfg["image_guide"])
        if sample_shape is not None and tuple(base.shape) != tuple(sample_shape):
            raise UsageError(f"image guide has shape {base.shape}, samples are {tuple(sample_shape)}")
        guide = ImageGuide(base, cfg["guide_scale"], cfg["decay"])
    threshold = cfg["threshold"]
    if threshold == "auto":
        # images live in [-1, 1], so clip x0; point data may not
        threshold = "static" if sample_shape is not None and len(sample_shape) == 3 else "none"
    return GuidanceConfig(
        cfg_scale=cfg["cfg_scale"],
        image_guide=guide,
        threshold=threshold,
        percentile=cfg["percentile"],
        threshold_target=cfg["threshold_target"],
    )


def load_base_image(source):
    """A PNG path, a container with a ``samples``/``x`` tensor, or a caption for a clean sprite."""
    if os.path.exists(source):
        if source.lower().endswith(".png"):
            from PIL import Image

            arr = np.asarray(Image.open(source).convert("RGB"), dtype=np.float64)
            return np.moveaxis(arr / 127.5 - 1.0, -1, 0)
        tensors, _ = io.load_container(source)
        for key in ("samples", "x"):
            if key in tensors:
                return tensors[key][0].astype(np.float64)
        raise ConfigError(f"{source}: no samples or x tensor to use as a base image")
    toks = data.tokenize(source)
    if len(toks) != 2:
        raise UsageError(f"image guide {source!r} is neither a file nor a 'colour shape' caption")
    return data.render_sprite(toks[0], toks[1])


# ------------------------------------------------------------ commands


def cmd_make_dataset(cfg):
    out = prepare_run_dir(cfg)
    emb = data.SyntheticEmbedder(cfg["embed_width"], cfg["seed"], cfg["embed_noise"])
    ds = data.make_dataset(cfg["kind"], cfg["count"], cfg["seed"], emb)
    path = os.path.join(out, "dataset.ddf")
    ds.save(path)
    print(f"dataset {path} kind={ds.kind} count={len(ds)}")
    return 0


def cmd_train_decoder(cfg):
    from .models import MLPConfig, TinyUNetConfig
    from .pipeline import DecoderRunConfig, train_decoder_run
    from .train import DecoderTrainConfig

    out = prepare_run_dir(cfg)
    ds = data.ToyDataset.load(cfg["dataset"]) if cfg["dataset"] else None
    emb_meta = (ds.meta.get("embedder") if ds is not None else None) or {}
    tcfg = DecoderTrainConfig(
        iterations=cfg["steps"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        lr_decay=cfg["lr_decay"],
        drop_prob=cfg["drop_prob"],
        lam=cfg["lam"],
        clip_norm=cfg["clip_norm"],
        ema_rate=cfg["ema_rate"],
        seed=cfg["seed"],
        checkpoint_every=cfg["checkpoint_every"],
        flip=cfg["flip"] and (ds.kind if ds is not None else cfg["kind"]) == "sprites",
    )
    ints = lambda s: tuple(int(v) for v in str(s).replace(" ", "").split(",") if v)  # noqa: E731
    run = DecoderRunConfig(
        dataset=ds.kind if ds is not None else cfg["kind"],
        count=cfg["count"],
        data_seed=emb_meta.get("seed", cfg["data_seed"]),
        embed_width=emb_meta.get("width", cfg["embed_width"]),
        embed_noise=emb_meta.get("noise", cfg["embed_noise"]),
        model=cfg["model"],
        T=cfg["T"],
        schedule=cfg["schedule"],
        train=tcfg,
        unet=TinyUNetConfig(
            base_channels=cfg["base_channels"],
            channel_mult=ints(cfg["channel_mult"]),
            num_res_blocks=cfg["num_res_blocks"],
            attention_resolutions=ints(cfg["attention_resolutions"]),
            head_channels=cfg["head_channels"],
            dropout=cfg["dropout"],
            norm_groups=cfg["norm_groups"],
        ),
        mlp=MLPConfig(hidden=cfg["hidden"], depth=cfg["depth"], time_dim=cfg["time_dim"]),
    )
    if ds is not None:
        cond_dim = ds.cond.shape[1]
        run.embed_width = cond_dim
    result, path = train_decoder_run(run, out, ds)
    final = result.loss_log[-1] if result.loss_log else {}
    print(f"decoder {path} steps={cfg['steps']} final_loss={final.get('total', float('nan')):.6f}")
    return 0


def cmd_train_translator(cfg):
    from .models import TranslatorConfig
    from .pipeline import train_translator_run
    from .train import TranslatorTrainConfig

    out = prepare_run_dir(cfg)
    decoder_path = _require(cfg, "decoder")
    _, _, _, meta = io.load_checkpoint(decoder_path)
    if cfg["dataset"]:
        ds = data.ToyDataset.load(cfg["dataset"])
    else:
        emb = data.SyntheticEmbedder(**meta["embedder"])
        ds = data.make_dataset(meta.get("dataset_kind", "sprites"), cfg["count"], cfg["data_seed"], emb)
    tcfg = TranslatorConfig(width=ds.cond.shape[1], layers=cfg["layers"], hidden_mult=cfg["hidden_mult"], dropout=cfg["dropout"])
    train_cfg = TranslatorTrainConfig(
        epochs=cfg["steps"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        val_fraction=cfg["val_fraction"],
        patience=cfg["patience"],
        seed=cfg["seed"],
    )
    res, path = train_translator_run(decoder_path, tcfg, train_cfg, out, ds)
    summary = {
        "best_epoch": res.best_epoch,
        "epochs_run": res.epochs_run,
        "best_val_mse": res.best_val_mse,
        "identity_mse": res.identity_mse,
    }
    io.write_json(os.path.join(out, "metrics", "translator.json"), summary)
    print(f"translator {path} " + " ".join(f"{k}={v}" for k, v in summary.items()))
    return 0


def _pipeline(cfg, need_translator=False):
    from .pipeline import Pipeline

    translator = cfg.get("translator") or None
    if need_translator and not translator:
        raise UsageError("missing required key 'translator'")
    return Pipeline.load(_require(cfg, "decoder"), translator, cfg.get("use_ema", True))


def _shape_of(pipe):
    from .sampler import model_sample_shape

    return model_sample_shape(pipe.decoder)


def cmd_sample(cfg):
    from .pipeline import save_samples, save_trace

    out = prepare_run_dir(cfg)
    pipe = _pipeline(cfg)
    res = pipe.generate(cfg["caption"], cfg["count"], cfg["seed"], guidance_from(cfg, _shape_of(pipe)), "decoder_only", cfg["trace"])
    save_samples(out, "samples", res.samples)
    save_trace(out, res.trace)
    report = {"caption": cfg["caption"], "count": cfg["count"]}
    if res.samples.ndim == 4:
        from collections import Counter

        report["labels"] = dict(Counter(data.classify_sprites(res.samples)))
    io.write_json(os.path.join(out, "metrics", "sample.json"), report)
    print(f"samples {os.path.join(out, 'samples')} count={cfg['count']}")
    return 0


def cmd_generate(cfg):
    from .pipeline import generate_report

    out = prepare_run_dir(cfg)
    pipe = _pipeline(cfg, need_translator=cfg["variant"] == "full")
    _, report = generate_report(
        pipe, cfg["caption"], cfg["count"], cfg["seed"], guidance_from(cfg, _shape_of(pipe)), cfg["variant"], out
    )
    io.write_json(os.path.join(out, "metrics", "generate.json"), report)
    print("generate " + json.dumps(report, sort_keys=True))
    return 0


def cmd_reconstruct(cfg):
    from .pipeline import save_samples
    from .sampler import reconstruct

    out = prepare_run_dir(cfg)
    pipe = _pipeline(cfg)
    original = None
    if cfg["dataset"]:
        ds = data.ToyDataset.load(cfg["dataset"])
        if not 0 <= cfg["index"] < len(ds):
            raise UsageError(f"index {cfg['index']} outside dataset of {len(ds)}")
        emb = pipe.image_stats.apply(ds.cond[cfg["index"]])
        original = ds.x[cfg["index"]]
        caption = ds.labels[cfg["index"]]
    else:
        caption = cfg["caption"]
        emb = pipe.condition(caption, "decoder_only")
    samples = reconstruct(pipe.decoder, pipe.schedule, emb, cfg["count"], cfg["seed"], guidance_from(cfg, _shape_of(pipe)))
    save_samples(out, "reconstruct", samples)
    if original is not None:
        save_samples(out, "original", original[None])
    report = {"caption": caption, "count": cfg["count"]}
    if samples.ndim == 4:
        from .pipeline import agreement

        report["agreement"] = agreement(samples, caption)[0]
    io.write_json(os.path.join(out, "metrics", "reconstruct.json"), report)
    print("reconstruct " + json.dumps(report, sort_keys=True))
    return 0


def cmd_algebra(cfg):
    from .pipeline import embedding_algebra_demo, save_samples

    out = prepare_run_dir(cfg)
    pipe = _pipeline(cfg)
    samples, report = embedding_algebra_demo(
        pipe, cfg["op"], cfg["a"], cfg["b"], cfg["coeff"], cfg["c"] or None, cfg["count"], cfg["seed"], guidance_from(cfg, _shape_of(pipe))
    )
    save_samples(out, "algebra", samples)
    io.write_json(os.path.join(out, "metrics", "algebra.json"), report)
    print("algebra " + json.dumps(report, sort_keys=True))
    return 0


def cmd_guide_demo(cfg):
    from .pipeline import image_guidance_experiment

    out = prepare_run_dir(cfg)
    pipe = _pipeline(cfg, need_translator=cfg["variant"] == "full")
    base = load_base_image(cfg["image_guide"] or cfg["caption"])
    plain_cfg = dict(cfg, image_guide="")
    _, _, report = image_guidance_experiment(
        pipe,
        base,
        cfg["caption"],
        cfg["guide_scale"],
        cfg["decay"],
        cfg["count"],
        cfg["seed"],
        guidance_from(plain_cfg, _shape_of(pipe)),
        cfg["variant"],
        out,
    )
    print("guide-demo " + json.dumps(report, sort_keys=True))
    return 0


def cmd_eval_fid(cfg):
    from .pipeline import fid_eval

    out = prepare_run_dir(cfg)
    pipe = _pipeline(cfg, need_translator=True)
    emb = pipe.embedder
    kind = "sprites" if pipe.decoder.kind == "unet" else "gaussians"
    real = data.make_dataset(kind, cfg["real_count"], cfg["real_seed"], emb)
    rows = fid_eval(pipe, real.x, real.labels, cfg["per_class"], cfg["seed"], guidance_from(cfg, _shape_of(pipe)), out)
    for r in rows:
        print("fid " + json.dumps(r, sort_keys=True))
    return 0


def cmd_grad_check(cfg):
    from .autodiff import suite

    prepare_run_dir(cfg)
    ops_err = suite.op_suite(trials=cfg["trials"], seed=cfg["seed"])
    failed = []
    rows = []
    for name, err in ops_err.items():
        ok = err < cfg["threshold"]
        rows.append({"check": name, "max_rel_error": err, "threshold": cfg["threshold"], "pass": ok})
        print(f"op {name:14s} max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if cfg["networks"]:
        for name, err in suite.network_suite(seed=cfg["seed"]).items():
            ok = err < cfg["net_threshold"]
            rows.append({"check": name, "max_rel_error": err, "threshold": cfg["net_threshold"], "pass": ok})
            print(f"net {name:13s} max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
            if not ok:
                failed.append(name)
    from .metrics import write_report

    write_report(os.path.join(cfg["out"], "metrics"), rows, "grad_check")
    if failed:
        raise GradCheckFailure(f"gradient check failed for {', '.join(failed)}")
    return 0


class GradCheckFailure(DeskDiffError):
    kind = "gradcheck"


COMMANDS = {
    "make-dataset": cmd_make_dataset,
    "train-decoder": cmd_train_decoder,
    "train-translator": cmd_train_translator,
    "sample": cmd_sample,
    "generate": cmd_generate,
    "reconstruct": cmd_reconstruct,
    "algebra": cmd_algebra,
    "guide-demo": cmd_guide_demo,
    "eval-fid": cmd_eval_fid,
    "grad-check": cmd_grad_check,
}


# --------------------------------------------------------------- parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_CHOICES = {
    "decay": ("linear", "constant", "cosine"),
    "kind": ("sprites", "gaussians", "moons"),
    "variant": ("full", "decoder_only", "no_translator"),
    "threshold_target": ("x0", "eps"),
}


def build_parser():
    """One flag per config key of each command, plus ``--config`` and ``--set``."""
    p = _Parser(prog="deskdiff", description="Desk-scale diffusion engine.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON or key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        for key, default in sorted(schema_for(name).items()):
            choices = _CHOICES.get(key)
            if key == "threshold" and isinstance(default, str):
                choices = ("auto", "none", "static", "dynamic")
            sp.add_argument("--" + key.replace("_", "-"), dest="opt_" + key, choices=choices, metavar=None if choices else key.upper())
    return p


def parse(argv):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        command = next((a for a in argv if a in SCHEMAS), None)
        if command and "unrecognized arguments" in str(exc):
            keys = ", ".join("--" + k.replace("_", "-") for k in sorted(schema_for(command)))
            raise UsageError(f"{exc}; valid keys for {command}: --config, --set, {keys}") from None
        raise
    command = args.command
    overrides = {}
    for key in schema_for(command):
        val = getattr(args, "opt_" + key, None)
        if val is not None:
            overrides[key] = val
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    file_cfg = read_config_file(args.config) if args.config else {}
    return command, resolve_config(command, file_cfg, overrides)


def error_line(kind, msg):
    return f"error kind={kind} msg={json.dumps(str(msg))}"


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        command, cfg = parse(argv)
        old_bits = backend.precision_bits()
        backend.set_precision(cfg["precision"])
        try:
            return COMMANDS[command](cfg)
        finally:
            backend.set_precision(old_bits)
            for h in list(logging.getLogger("deskdiff").handlers):
                if isinstance(h, logging.FileHandler):
                    logging.getLogger("deskdiff").removeHandler(h)
                    h.close()
    except UsageError as exc:
        print(error_line("usage", exc), file=sys.stderr)
        return 2
    except DeskDiffError as exc:
        print(error_line(exc.kind, exc), file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(error_line("io", exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

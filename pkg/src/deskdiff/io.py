"""File formats: tensor container (checkpoints and datasets), PNG grids, CSV.

Container layout::

    b"DESKDIF1" | uint64 LE manifest length | UTF-8 JSON manifest | blobs

The manifest lists each tensor's name, dtype (``<f4``, ``<f8`` or ``<i8``),
shape, byte offset and byte length relative to the start of the blob area.
Blobs are raw little-endian, row-major.
"""

import csv
import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError

MAGIC = b"DESKDIF1"
FORMAT_VERSION = 1
_ALLOWED = {"<f4", "<f8", "<i8"}


def _canonical_dtype(arr):
    if np.issubdtype(arr.dtype, np.floating):
        return "<f8" if arr.dtype == np.float64 else "<f4"
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return "<i8"
    raise FormatError(f"unsupported tensor dtype {arr.dtype}")


def _atomic_write(path, payload: bytes):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_container(path, tensors: dict, meta: dict):
    """Write named arrays plus a JSON-serialisable ``meta`` dict."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = _canonical_dtype(arr)
        raw = np.ascontiguousarray(arr, dtype=np.dtype(dt)).tobytes()
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "meta": meta, "tensors": entries}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    _atomic_write(path, MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs))


def load_container(path, expect_version=FORMAT_VERSION):
    """Return ``(tensors, meta)``; raises FormatError on any inconsistency."""
    with open(path, "rb") as fh:
        payload = fh.read()
    if payload[:8] != MAGIC:
        raise FormatError(f"{path}: not a deskdiff container (bad magic)")
    if len(payload) < 16:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", payload[8:16])
    try:
        manifest = json.loads(payload[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})") from None
    version = manifest.get("format_version")
    if version != expect_version:
        raise FormatError(f"{path}: format version {version} but this build reads version {expect_version}")
    base = 16 + n
    tensors = {}
    for e in manifest["tensors"]:
        if e["dtype"] not in _ALLOWED:
            raise FormatError(f"{path}: tensor {e['name']} has unsupported dtype {e['dtype']}")
        start = base + e["offset"]
        stop = start + e["nbytes"]
        if stop > len(payload):
            raise FormatError(f"{path}: tensor {e['name']} runs past end of file")
        arr = np.frombuffer(payload[start:stop], dtype=np.dtype(e["dtype"]))
        expected = int(np.prod(e["shape"], dtype=np.int64))
        if arr.size != expected:
            raise FormatError(f"{path}: tensor {e['name']} has {arr.size} values, shape says {expected}")
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return tensors, manifest["meta"]


# ------------------------------------------------------------ checkpoints


def save_checkpoint(path, model, schedule=None, extra_tensors=None, meta=None):
    """Model parameters (``param/``), optional schedule (``schedule/``) and extras."""
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    if schedule is not None:
        tensors.update({f"schedule/{k}": v for k, v in schedule.to_arrays().items()})
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v
    info = {"kind": "checkpoint", "model_kind": model.kind, "model_config": model.config_dict()}
    if schedule is not None:
        info["schedule_kind"] = schedule.kind
    info.update(meta or {})
    save_container(path, tensors, info)


def load_checkpoint(path):
    """Rebuild ``(model, schedule_or_None, tensors, meta)`` from a checkpoint."""
    from .models import build_model
    from .schedule import NoiseSchedule

    tensors, meta = load_container(path)
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"{path}: container holds {meta.get('kind')!r}, not a checkpoint")
    model = build_model(meta["model_kind"], meta["model_config"])
    state = {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}
    model.load_state_dict(state)
    sched = None
    sched_arrays = {k[len("schedule/") :]: v for k, v in tensors.items() if k.startswith("schedule/")}
    if sched_arrays:
        sched = NoiseSchedule.from_arrays(sched_arrays, kind=meta.get("schedule_kind", "custom"))
    return model, sched, tensors, meta


# ------------------------------------------------------------- images, CSV


def to_uint8(images):
    """[-1, 1] floats in (N, C, H, W) or (C, H, W) to uint8 HWC."""
    x = np.asarray(images, dtype=np.float64)
    x = np.clip(np.rint((x + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return np.moveaxis(x, -3, -1)


def image_grid(images, cols=None, pad=1):
    """Tile a batch of (N, C, H, W) images into one uint8 HWC array."""
    tiles = to_uint8(images)
    n, h, w, c = tiles.shape
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, c), 255, dtype=np.uint8)
    for i in range(n):
        r, q = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        grid[y : y + h, x : x + w] = tiles[i]
    return grid


def save_png(path, images, cols=None, scale=1):
    from PIL import Image

    grid = image_grid(images, cols)
    img = Image.fromarray(grid if grid.shape[2] == 3 else grid[:, :, 0])
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    img.save(path, format="PNG")


def write_csv(path, header, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def save_points_csv(path, points, labels=None):
    pts = np.asarray(points)
    header = [f"x{i}" for i in range(pts.shape[1])] + (["label"] if labels is not None else [])
    rows = (list(p) + ([labels[i]] if labels is not None else []) for i, p in enumerate(pts))
    write_csv(path, header, rows)

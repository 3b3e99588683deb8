"""Compare the numba and numpy kernel paths.

Part 1 times each kernel on its own, both implementations in this process.
Part 2 times a full U-Net training step in two subprocesses, one per value of
DESKDIFF_DISABLE_NUMBA, since the active path is chosen at import time.

    python3 benchmarks/bench_kernels.py [--repeats N] [--json out.json]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

STEP_SNIPPET = r"""
import json, timeit, numpy as np
from deskdiff.autodiff import kernels
from deskdiff.losses import l_hybrid
from deskdiff.models import TinyUNet
from deskdiff.pipeline import SPRITE_UNET
from deskdiff.schedule import cosine_schedule

rng = np.random.default_rng(0)
model = TinyUNet(SPRITE_UNET, 0)
sched = cosine_schedule(100)
x = rng.uniform(-1, 1, (16, 3, 16, 16))
cond = rng.standard_normal((16, 64))

def step():
    parts = l_hybrid(model, x, rng.integers(1, 101, 16), rng.standard_normal(x.shape), cond, sched)
    parts.total.backward()

step()
times = timeit.repeat(step, number=1, repeat=REPEATS)
print(json.dumps({"active": kernels.ACTIVE, "best_s": min(times), "median_s": float(np.median(times))}))
"""


def bench_kernels(repeats):
    from deskdiff.autodiff import kernels

    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, 32, 16, 16)).astype(np.float32)
    rows = rng.standard_normal((16 * 8, 4 * 256)).astype(np.float32)
    results = {}
    for name, (im2col, col2im, nf, nb) in kernels.IMPLEMENTATIONS.items():
        cols = im2col(x)
        xhat, inv = nf(rows, 1e-5)
        # first call compiles under numba; keep it out of the timing
        col2im(cols, x.shape)
        nb(rows, xhat, inv)
        cases = {
            "im2col3": lambda: im2col(x),
            "col2im3": lambda: col2im(cols, x.shape),
            "rownorm_forward": lambda: nf(rows, 1e-5),
            "rownorm_backward": lambda: nb(rows, xhat, inv),
        }
        results[name] = {k: min(timeit.repeat(f, number=5, repeat=repeats)) / 5 for k, f in cases.items()}
    return results


def bench_step(repeats):
    out = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, DESKDIFF_DISABLE_NUMBA=flag, DESKDIFF_PRECISION="32")
        proc = subprocess.run(
            [sys.executable, "-c", STEP_SNIPPET.replace("REPEATS", str(repeats))],
            env=env,
            capture_output=True,
            text=True,
            check=True,
        )
        out[label] = json.loads(proc.stdout.strip().splitlines()[-1])
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()

    kern = bench_kernels(args.repeats)
    print(f"{'kernel':18s} " + " ".join(f"{k:>12s}" for k in kern) + "   speedup")
    for op in next(iter(kern.values())):
        row = {k: v[op] for k, v in kern.items()}
        speed = row["numpy"] / row["numba"] if "numba" in row else float("nan")
        print(f"{op:18s} " + " ".join(f"{1e3 * row[k]:10.3f}ms" for k in kern) + f"   {speed:6.2f}x")

    step = bench_step(args.repeats)
    for label, r in step.items():
        print(f"U-Net train step ({label:5s} kernels, active={r['active']}): best {1e3 * r['best_s']:.1f} ms")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": kern, "train_step": step}, fh, indent=2)


if __name__ == "__main__":
    main()

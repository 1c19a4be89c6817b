"""Timing comparison: compiled conv2d kernels vs the numpy im2col fallback.

Each row times forward, weight-gradient, and input-gradient passes on a
shape drawn from the desk-scale model, checks that the two backends agree
to near machine precision, and reports the speedup. Run with --train-step
to also time one full NLL + backward training step per backend in a
subprocess (backend choice is fixed at import time, so a fresh process is
the only honest way to compare end to end).

Usage: python3 benchmarks/bench_conv.py [--repeats N] [--train-step]
"""

import argparse
import statistics
import subprocess
import sys
import time

import numpy as np

from stflow._kernels import conv_ref

try:
    from stflow._kernels import _conv_cy
except ImportError:
    _conv_cy = None

# (label, x shape, w shape, padding, stride): the convolutions a desk-scale
# training step actually spends its time in
CASES = [
    ("coupling in   16x34x8x8 -> 48", (16, 34, 8, 8), (48, 34, 3, 3), 1, 1),
    ("coupling hid  16x48x8x8 -> 48", (16, 48, 8, 8), (48, 48, 3, 3), 1, 1),
    ("coupling head 16x48x8x8 -> 4", (16, 48, 8, 8), (4, 48, 3, 3), 1, 1),
    ("lstm gates    16x33x16x16 -> 128", (16, 33, 16, 16), (128, 33, 3, 3), 1, 1),
    ("deep scale    16x8x4x4 -> 48", (16, 8, 4, 4), (48, 8, 3, 3), 1, 1),
]


def _time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_case(label, x_shape, w_shape, padding, stride, repeats):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(x_shape)
    w = rng.standard_normal(w_shape)
    gy = conv_ref.conv2d_forward(x, w, padding, stride)
    gy = rng.standard_normal(gy.shape)

    passes = {
        "fwd": lambda impl: impl.conv2d_forward(x, w, padding, stride),
        "dw": lambda impl: impl.conv2d_grad_weight(gy, x, w_shape, padding, stride),
        "dx": lambda impl: impl.conv2d_grad_input(gy, w, x_shape, padding, stride),
    }
    row = {"label": label}
    for name, call in passes.items():
        ref = call(conv_ref)
        t_ref = _time(lambda: call(conv_ref), repeats)
        if _conv_cy is not None:
            got = call(_conv_cy)
            err = float(np.abs(got - ref).max())
            if err > 1e-10:
                raise SystemExit(f"backend disagreement on {label} {name}: {err}")
            t_cy = _time(lambda: call(_conv_cy), repeats)
        else:
            t_cy = float("nan")
        row[name] = (t_ref, t_cy)
    return row


def bench_train_step(backend):
    code = (
        "import os, time, numpy as np\n"
        f"os.environ['STFLOW_BACKEND'] = '{backend}'\n"
        "from stflow import ndtensor as nd\n"
        "from stflow.model import ModelConfig, STFlow\n"
        "from stflow._kernels import BACKEND\n"
        "cfg = ModelConfig(height=16, width=16, levels=2, flow_steps=2,\n"
        "                  cond_channels=32, coupling_hidden=48,\n"
        "                  gated_hidden=32, gated_layers=1)\n"
        "model = STFlow(cfg, seed=0)\n"
        "rng = np.random.default_rng(0)\n"
        "frames = [nd.Tensor(rng.random((16, 1, 16, 16))) for _ in range(2)]\n"
        "x = nd.Tensor(rng.random((16, 1, 16, 16)))\n"
        "def step():\n"
        "    mem = model.encode_context(frames)\n"
        "    nll, _ = model.forward_nll(x, mem)\n"
        "    nd.backward(nd.tmean(nll))\n"
        "step()\n"
        "times = []\n"
        "for _ in range(3):\n"
        "    t0 = time.perf_counter(); step(); times.append(time.perf_counter() - t0)\n"
        "print(BACKEND, min(times))\n"
    )
    out = subprocess.run([sys.executable, "-c", code], capture_output=True,
                         text=True, check=True)
    name, secs = out.stdout.split()
    return name, float(secs)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--train-step", action="store_true",
                    help="also time one full training step per backend")
    args = ap.parse_args()

    if _conv_cy is None:
        print("compiled extension not available; timing the numpy fallback only")

    header = f"{'case':<34} {'pass':<4} {'numpy ms':>9} {'compiled ms':>12} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    ratios = []
    for case in CASES:
        row = bench_case(*case, repeats=args.repeats)
        for name in ("fwd", "dw", "dx"):
            t_ref, t_cy = row[name]
            speed = t_ref / t_cy if t_cy == t_cy else float("nan")
            if speed == speed:
                ratios.append(speed)
            print(f"{row['label']:<34} {name:<4} {t_ref * 1e3:>9.3f} "
                  f"{t_cy * 1e3:>12.3f} {speed:>8.2f}")
    if ratios:
        geo = statistics.geometric_mean(ratios)
        print(f"\ngeometric-mean kernel speedup: {geo:.2f}x")

    if args.train_step:
        print("\nfull training step (desk model, batch 16):")
        for backend in ("numpy", "compiled"):
            if backend == "compiled" and _conv_cy is None:
                continue
            name, secs = bench_train_step(backend)
            print(f"  {name:<9} {secs * 1e3:>9.1f} ms")


if __name__ == "__main__":
    main()

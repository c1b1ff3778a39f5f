"""Time the numba kernels against their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Shapes follow the default 12-lead model at 100 Hz: a batch of 32 through the
first conv block, the pooling after it, and one record through the 15th-order
low-pass.
"""
import argparse
import time

import numpy as np

from ecglite import _accel, kernels
from ecglite.dsp import design_lowpass


def best_of(fn, args, repeat):
    fn(*args)  # compile / warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    x = rng.normal(size=(32, 12, 1000))
    w = rng.normal(size=(7, 12, 16))
    b = rng.normal(size=16)
    dy = rng.normal(size=(32, 16, 1000))
    act = rng.normal(size=(32, 16, 1000))
    _, idx = kernels.maxpool2_forward_np(act)
    dpool = rng.normal(size=(32, 16, 500))
    sos = design_lowpass(15, 45, 100).sections
    sig = rng.normal(size=(12, 1000))
    zi = np.zeros((sos.shape[0], 12, 2))
    return [
        ("sosfilt 12x1000, 8 sections", "sosfilt", (sos, sig, zi)),
        ("conv1d forward 32x12x1000 k7 -> 16", "conv1d_forward", (x, w, b)),
        ("conv1d backward", "conv1d_backward", (x, w, dy)),
        ("maxpool2 forward 32x16x1000", "maxpool2_forward", (act,)),
        ("maxpool2 backward", "maxpool2_backward", (dpool, idx, 1000)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _accel.HAS_NUMBA:
        print("numba is unavailable or disabled; only the numpy path can be timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':40s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, name, call_args in cases(rng):
        t_np = best_of(getattr(kernels, name + "_np"), call_args, args.repeat)
        if _accel.HAS_NUMBA:
            t_jit = best_of(getattr(kernels, name + "_jit"), call_args, args.repeat)
            print(f"{label:40s} {1e3 * t_np:10.2f} {1e3 * t_jit:10.2f} {t_np / t_jit:7.1f}x")
        else:
            print(f"{label:40s} {1e3 * t_np:10.2f} {'-':>10s} {'-':>8s}")


if __name__ == "__main__":
    main()

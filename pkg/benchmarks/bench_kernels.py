"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 200] [--iters 200]

Prints per-call times for each kernel at training-batch sizes, then the wall
clock of a short default-size training run under each backend.  The two runs
must produce the same loss trace up to summation-order rounding.
"""

import argparse
import timeit

import numpy as np

from mcmil import kernels
from mcmil.dataset import SyntheticSpec, generate_synthetic
from mcmil.trainer import TrainConfig, train


def kernel_cases(rng):
    rows, width = 420, 512  # 30+30 scenes of ~7 clips, first hidden layer
    z = rng.standard_normal((rows, width)).astype(np.float32)
    mask = rng.random((rows, width)) < 0.4
    da = rng.standard_normal((rows, width)).astype(np.float32)

    lengths = rng.integers(4, 11, size=60)
    off = np.concatenate([[0], np.cumsum(lengths[:30])])
    n_off = np.concatenate([[0], np.cumsum(lengths[30:])])
    a = rng.random(off[-1])
    n = rng.random(n_off[-1])

    frames = 20000
    s = np.sort(np.round(rng.random(frames), 3))[::-1].copy()
    y = rng.random(frames) < 0.3
    return {
        "relu_dropout (420x512)": lambda: kernels.relu_dropout(z, mask, 2.5),
        "relu_dropout_grad (420x512)": lambda: kernels.relu_dropout_grad(da, z, mask, 2.5),
        "mil_pair_losses (30 pairs)": lambda: kernels.mil_pair_losses(a, off, n, n_off, 8e-5, 8e-5),
        "roc_counts (20k frames)": lambda: kernels.roc_counts(s, y),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200, help="calls per kernel timing")
    ap.add_argument("--iters", type=int, default=200, help="training iterations per backend")
    args = ap.parse_args()

    backends = kernels.available_backends()
    cases = kernel_cases(np.random.default_rng(0))
    print(f"{'kernel':32s}" + "".join(f"{b:>14s}" for b in backends) + "   speedup")
    for name, fn in cases.items():
        times = {}
        for b in backends:
            kernels.set_backend(b)
            fn()  # compile / warm up
            times[b] = timeit.timeit(fn, number=args.repeat) / args.repeat * 1e6
        speed = times["numpy"] / times["numba"] if "numba" in times else float("nan")
        print(f"{name:32s}" + "".join(f"{times[b]:11.1f} us" for b in backends) + f"   {speed:6.2f}x")

    ds = generate_synthetic(SyntheticSpec(seed=0))
    cfg = TrainConfig(mode="mc", iterations=args.iters)
    traces = {}
    print()
    for b in backends:
        kernels.set_backend(b)
        train(ds, TrainConfig(mode="mc", iterations=2))  # warm up
        _, trace = train(ds, cfg)
        traces[b] = trace.loss
        print(f"train mc-max, {args.iters} iterations, {b:6s}: {trace.wall_clock:6.2f} s")
    if len(traces) == 2:
        gap = np.max(np.abs(traces["numba"] - traces["numpy"]) / np.abs(traces["numpy"]))
        print(f"max relative loss-trace difference between backends: {gap:.1e}")


if __name__ == "__main__":
    main()

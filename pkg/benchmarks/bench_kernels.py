"""Benchmark the convolution kernels: numba backend against the numpy fallback.

Runs each primitive (forward, input gradient, weight gradient) on detector-sized
tensors, reports wall time per call for both backends plus the maximum absolute
discrepancy between their outputs.

Usage: python benchmarks/bench_kernels.py [--size 96] [--channels 8] [--reps 20]
"""

import argparse
import time

import numpy as np

from shape_evade import kernels


def _time(fn, reps):
    fn()  # warm-up (numba compiles on first call)
    t0 = time.perf_counter()
    for _ in range(reps):
        out = fn()
    return (time.perf_counter() - t0) / reps, out


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=96,
                        help="square image side (default 96)")
    parser.add_argument("--channels", type=int, default=8,
                        help="input/output channel count (default 8)")
    parser.add_argument("--reps", type=int, default=20,
                        help="timed repetitions per case (default 20)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    backends = ["numpy"]
    try:
        import numba  # noqa: F401

        backends.append("numba")
    except ImportError:
        print("numba not importable; benchmarking the numpy fallback only")

    rng = np.random.default_rng(args.seed)
    c, s = args.channels, args.size
    x = rng.standard_normal((c, s, s))
    w = rng.standard_normal((c, c, kernels.KERNEL_SIZE, kernels.KERNEL_SIZE))
    b = rng.standard_normal(c)
    gy = rng.standard_normal((c, s, s))

    cases = {
        "conv_forward": lambda: kernels.conv_forward(x, w, b),
        "conv_input_grad": lambda: kernels.conv_input_grad(gy, w),
        "conv_weight_grad": lambda: kernels.conv_weight_grad(x, gy)[0],
    }

    print(f"tensors: x ({c},{s},{s})  w ({c},{c},5,5)  reps {args.reps}")
    print(f"{'case':<18} " + " ".join(f"{b:>12}" for b in backends)
          + ("   max |delta|" if len(backends) > 1 else ""))
    saved = kernels.backend_name()
    try:
        for name, fn in cases.items():
            times, outs = [], []
            for backend in backends:
                kernels.set_backend(backend)
                dt, out = _time(fn, args.reps)
                times.append(dt)
                outs.append(out)
            row = f"{name:<18} " + " ".join(f"{dt * 1e3:>9.2f} ms" for dt in times)
            if len(outs) > 1:
                row += f"   {np.abs(outs[0] - outs[1]).max():.3e}"
            print(row)
    finally:
        kernels.set_backend(saved)


if __name__ == "__main__":
    main()

"""Time the numba kernels against the numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is run once per backend to warm up (JIT compile) and then timed.
Outputs of the two backends are compared so a fast but wrong kernel shows up.
"""
import argparse
import time

import numpy as np

from tltradeoff import _accel, kernels


def _best_of(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _cases(rng):
    x = rng.normal(size=(16, 32, 32, 8)).astype(np.float32)
    w = rng.normal(size=(3, 3, 8, 16)).astype(np.float32)
    b = np.zeros(16, np.float32)
    g = rng.normal(size=(16, 30, 30, 16)).astype(np.float32)
    X = rng.normal(size=(300, 20))
    y = np.where(X[:, 0] + 0.5 * rng.normal(size=300) > 0, 1.0, -1.0)
    return {
        "conv2d_forward": lambda: kernels.conv2d_forward(x, w, b),
        "conv2d_backward": lambda: kernels.conv2d_backward(x, w, g),
        "smo_binary": lambda: kernels.smo_binary(X, y, 1.0, 1e-3, 1000)[:2],
    }


def _close(a, b):
    if isinstance(a, tuple):
        return all(_close(p, q) for p, q in zip(a, b))
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return a.shape == b.shape and np.allclose(a, b, rtol=1e-3, atol=1e-3 * (1 + np.abs(b).max(initial=0)))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    cases = _cases(np.random.default_rng(0))
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  agree")
    saved = _accel.USE_NUMBA
    try:
        for name, fn in cases.items():
            times, outs = {}, {}
            for flag in (True, False):
                _accel.USE_NUMBA = flag
                times[flag] = _best_of(fn, args.repeat)
                outs[flag] = fn()
            agree = _close(outs[True], outs[False])
            print(f"{name:<18}{times[True] * 1e3:>10.2f}{times[False] * 1e3:>10.2f}"
                  f"{times[False] / times[True]:>8.1f}x  {'yes' if agree else 'NO'}")
    finally:
        _accel.USE_NUMBA = saved


if __name__ == "__main__":
    main()

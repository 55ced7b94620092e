"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from cmdlife import _pykernels as py

try:
    from cmdlife import _ckernels as cy
except ImportError:  # extension not built
    cy = None


def cases(rng):
    sig = np.cumsum(rng.normal(0, 5, 4000)) + 5000.0
    starts = np.sort(rng.uniform(0, 3600, 5000))
    ends = starts + rng.uniform(0.5, 8, 5000)
    lines = rng.integers(-10, 74, size=(400, 4))

    def draw(mod):
        canvas = np.ones((64, 64, 3))
        for r0, c0, r1, c1 in lines:
            mod.draw_line(canvas, int(r0), int(c0), int(r1), int(c1), (0.0, 0.0, 1.0))

    return {
        "window_stats (n=4000, win=21)": lambda mod: mod.window_stats(sig, 21, 100.0),
        "draw_line (400 segments)": draw,
        "max_concurrency (n=5000)": lambda mod: mod.max_concurrency(starts, ends),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        if cy is None:
            print(f"{name:34s} {t_py:10.2f} {'n/a':>10s} {'':>8s}")
            continue
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:34s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()

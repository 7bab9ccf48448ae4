"""Time each hot kernel under the numba and pure-numpy backends.

    python benchmarks/bench_kernels.py [--repeat 5]

The first numba call compiles; it is excluded by a warm-up call.  Outputs
are checked for agreement before timing.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from cersdx import kernels
from cersdx._accel import HAVE_NUMBA


def cases(rng):
    hist = rng.integers(0, 500, 256).astype(np.float64)
    centers = np.arange(256.0)
    mask = rng.random((2000, 2000)) < 0.4
    ys, xs = np.meshgrid(np.arange(0, 1984, 16), np.arange(0, 1984, 16), indexing="ij")
    a = rng.integers(0, 50, 400)
    b = rng.integers(0, 50, 400)
    pos, neg = rng.random(3000), rng.random(3000)
    pts = rng.standard_normal((600, 64))
    p, g = rng.standard_normal(512 * 384), rng.standard_normal(512 * 384)
    m, v = np.zeros_like(p), np.zeros_like(p)
    return {
        "otsu_split(256 bins)": lambda be: kernels.otsu_split(hist, centers, be),
        "window_fractions(2000^2, 15k windows)": lambda be: kernels.window_fractions(mask, ys.ravel(), xs.ravel(), 16, be),
        "lcs_length(400 x 400)": lambda be: kernels.lcs_length(a, b, be),
        "mann_whitney(3000 x 3000)": lambda be: kernels.mann_whitney_twice_u(pos, neg, be),
        "pairwise_distances(600 x 64)": lambda be: kernels.pairwise_distances(pts, be),
        "adam_update(196k params)": lambda be: kernels.adam_update(
            p, g, m, v, 1e-4, 0.9, 0.999, 1e-8, 0.1, 0.001, 1e-5, backend=be),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy backend can be timed")
    rng = np.random.default_rng(0)
    backends = ["numpy"] + (["numba"] if HAVE_NUMBA else [])
    print(f"{'kernel':40s} " + " ".join(f"{b:>12s}" for b in backends) + ("   speedup" if HAVE_NUMBA else ""))
    for name, fn in cases(rng).items():
        if name.startswith("adam"):
            results = None  # in-place update; agreement is covered by the test suite
        else:
            results = [fn(be) for be in backends]  # also warms up numba
            for r in results[1:]:
                np.testing.assert_allclose(np.asarray(r, dtype=float), np.asarray(results[0], dtype=float), atol=1e-9)
        times = []
        for be in backends:
            fn(be)
            best = min(timeit.repeat(lambda: fn(be), number=1, repeat=args.repeat))
            times.append(best)
        row = f"{name:40s} " + " ".join(f"{t * 1e3:10.3f}ms" for t in times)
        if HAVE_NUMBA:
            row += f"   {times[0] / times[1]:7.1f}x"
        print(row)


if __name__ == "__main__":
    main()

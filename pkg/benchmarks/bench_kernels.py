"""Compare the compiled and numpy greedy-matching kernels.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``. Prints the
best-of-N time per call for each problem size and checks that both
backends return identical matches.
"""

import argparse
import timeit

import numpy as np

from wscbias import _fallback

try:
    from wscbias import _kernels
except ImportError:  # extension not built
    _kernels = None

SIZES = [(10, 500), (50, 2000), (50, 13859), (200, 13859)]


def problem(n_ct, n_pool, dim=20, seed=0):
    rng = np.random.default_rng(seed)
    ct = np.ascontiguousarray(rng.standard_normal((n_ct, dim)))
    pool = np.ascontiguousarray(rng.standard_normal((n_pool, dim)))
    return ct, pool, rng.normal(0, 1, n_ct), rng.normal(0, 1, n_pool), rng.permutation(n_ct), 0.2


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = {"python": _fallback.greedy_match}
    if _kernels is not None:
        backends["compiled"] = _kernels.greedy_match
    print(f"{'n_ct':>6} {'n_pool':>7} " + " ".join(f"{b:>12}" for b in backends) + "  speedup")
    for n_ct, n_pool in SIZES:
        args_ = problem(n_ct, n_pool)
        times, results = {}, {}
        for name, fn in backends.items():
            results[name] = fn(*args_)
            times[name] = min(timeit.repeat(lambda: fn(*args_), number=1, repeat=args.repeat))
        if len(results) == 2:
            a, b = results.values()
            assert np.array_equal(a[0], b[0]) and np.array_equal(a[2], b[2])
            np.testing.assert_allclose(a[1], b[1], rtol=1e-12)
        speed = f"{times['python'] / times['compiled']:7.1f}x" if "compiled" in times else "     n/a"
        print(f"{n_ct:>6} {n_pool:>7} " + " ".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends)
              + f"  {speed}")


if __name__ == "__main__":
    main()

"""Time the compiled CTC / edit-distance kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeats 20]
"""
import argparse
import timeit

import numpy as np

from lip2speech import _kernels_py

try:
    from lip2speech import _kernels
except ImportError:
    _kernels = None


def ctc_case(rng, T, N, L):
    x = rng.normal(size=(T, N))
    lp = x - np.log(np.exp(x).sum(1, keepdims=True))
    return lp, rng.integers(1, N, size=L).astype(np.int64)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = [("python", _kernels_py)]
    if _kernels is not None:
        backends.append(("cython", _kernels))
    else:
        print("compiled kernels not built; timing the fallback only")

    print(f"{'kernel':<28}{'backend':<10}{'ms/call':>10}")
    for T, N, L in [(50, 14, 9), (200, 14, 40), (800, 30, 150)]:
        lp, tgt = ctc_case(rng, T, N, L)
        times = {}
        for name, mod in backends:
            t = timeit.timeit(lambda: mod.ctc_forward_backward(lp, tgt, 0), number=args.repeats)
            times[name] = 1e3 * t / args.repeats
            print(f"{f'ctc T={T} N={N} L={L}':<28}{name:<10}{times[name]:>10.3f}")
        if len(times) == 2:
            print(f"{'':<28}{'speedup':<10}{times['python'] / times['cython']:>9.1f}x")
    for n in (10, 100, 400):
        a = rng.integers(0, 12, size=n).astype(np.int64)
        b = rng.integers(0, 12, size=n).astype(np.int64)
        times = {}
        for name, mod in backends:
            t = timeit.timeit(lambda: mod.edit_distance(a, b), number=args.repeats)
            times[name] = 1e3 * t / args.repeats
            print(f"{f'edit_distance n={n}':<28}{name:<10}{times[name]:>10.3f}")
        if len(times) == 2:
            print(f"{'':<28}{'speedup':<10}{times['python'] / times['cython']:>9.1f}x")


if __name__ == "__main__":
    main()

"""Compare the compiled and numpy Adam kernels on parameter-sized vectors.

    python3 benchmarks/bench_kernels.py [--sizes 5301,700000] [--repeats 50]
"""
import argparse
import timeit

import numpy as np

from koodos import kernels


def bench(mod, n, repeats):
    rng = np.random.default_rng(0)
    p, g, m = rng.normal(size=(3, n))
    v = np.abs(rng.normal(size=n))
    step = [0]

    def once():
        step[0] += 1
        mod.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, step[0])

    once()
    return min(timeit.repeat(once, number=10, repeat=repeats)) / 10


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="5301,26505,700000,5000000")
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    impls = kernels.backends()
    print(f"selected backend: {kernels.BACKEND}")
    print(f"{'n':>9} " + " ".join(f"{name + ' us':>12}" for name in impls) + "   speedup")
    for n in (int(s) for s in args.sizes.split(",")):
        times = {name: bench(mod, n, args.repeats) for name, mod in impls.items()}
        cols = " ".join(f"{1e6 * times[name]:12.1f}" for name in impls)
        speed = f"{times['python'] / times['cython']:8.2f}x" if "cython" in times else "      n/a"
        print(f"{n:>9} {cols} {speed}")


if __name__ == "__main__":
    main()

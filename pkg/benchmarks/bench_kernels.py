"""Time the compiled kernels against the numpy fallback.

Run: python benchmarks/bench_kernels.py [--repeat 50]
"""

import argparse
import timeit

import numpy as np

from icp_reasoner import _pykernels

try:
    from icp_reasoner import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    for n in (16, 64, 256, 1024):
        src = rng.normal(size=(n, 3))
        tgt = rng.normal(size=(n, 3))
        mask = np.ones(n, dtype=bool)
        yield f"nearest_neighbors n={n}", "nearest_neighbors", (src, tgt, mask, mask)
    for n, h in ((8, 16), (16, 64), (32, 64)):
        x = rng.normal(size=(n * n, n, 8))
        yield f"max_argmax triplet n={n}", "max_argmax", (x,)
        x = rng.normal(size=(n, n, h))
        yield f"max_argmax messages n={n} h={h}", "max_argmax", (x,)
        g = rng.normal(size=(n, h))
        _, idx = _pykernels.max_argmax(x)
        yield f"scatter_argmax n={n} h={h}", "scatter_argmax", (g, idx, n)


def bench(fn, args, repeat):
    t = timeit.Timer(lambda: fn(*args))
    number, _ = t.autorange()
    return min(t.repeat(repeat=repeat, number=number)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'case':40s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for name, fn_name, fn_args in cases(rng):
        py = bench(getattr(_pykernels, fn_name), fn_args, args.repeat)
        if _ckernels is None:
            print(f"{name:40s} {py * 1e6:10.1f} {'n/a':>10s} {'':>8s}")
            continue
        cy = bench(getattr(_ckernels, fn_name), fn_args, args.repeat)
        a = getattr(_pykernels, fn_name)(*fn_args)
        b = getattr(_ckernels, fn_name)(*fn_args)
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        same = all(np.array_equal(np.asarray(x), np.asarray(y)) for x, y in zip(a, b))
        flag = "" if same else "  MISMATCH"
        print(f"{name:40s} {py * 1e6:10.1f} {cy * 1e6:10.1f} {py / cy:7.2f}x{flag}")


if __name__ == "__main__":
    main()

"""Time the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``. Prints a row per kernel and
problem size, and checks that both backends agree before timing.
"""
import argparse
import timeit

import numpy as np

from valuestitch import _pykernels

try:
    from valuestitch import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _cases(rng, n):
    z = rng.standard_normal((n, 128))
    y, sig = _pykernels.silu_forward(z)
    g = rng.standard_normal(z.shape)
    w = rng.random(n)
    w /= w.sum()
    u = np.sort(rng.random(n))
    return {
        "silu_forward": lambda k: k.silu_forward(z),
        "silu_backward": lambda k: k.silu_backward(g, z, sig),
        "inverse_cdf": lambda k: k.inverse_cdf(w, u),
    }


def _same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(x, y, rtol=1e-12, atol=1e-14) for x, y in zip(a, b))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="64,512,4096")
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14} {'n':>6} {'python_us':>11} {'cython_us':>11} {'speedup':>8}")
    for n in map(int, args.sizes.split(",")):
        for name, call in _cases(rng, n).items():
            number = max(1, 20_000 // n)
            t_py = min(timeit.repeat(lambda: call(_pykernels), number=number, repeat=args.repeat)) / number
            if _ckernels is None:
                print(f"{name:<14} {n:>6} {t_py * 1e6:>11.1f} {'-':>11} {'-':>8}")
                continue
            if not _same(call(_pykernels), call(_ckernels)):
                raise SystemExit(f"{name}: backends disagree at n={n}")
            t_c = min(timeit.repeat(lambda: call(_ckernels), number=number, repeat=args.repeat)) / number
            print(f"{name:<14} {n:>6} {t_py * 1e6:>11.1f} {t_c * 1e6:>11.1f} {t_py / t_c:>7.2f}x")


if __name__ == "__main__":
    main()

"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--n 200000] [--repeat 5]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from twostage import _pykernels, kernels


def _cases(n: int, rng: np.random.Generator):
    K, q, r = 4, 10, 3
    z = rng.standard_normal((n, q))
    w = rng.standard_normal((K, q)) * 2
    T = rng.standard_normal((r, q))
    g = rng.standard_normal(n)
    y = rng.standard_normal((n, q))
    return {
        "mixture_responsibilities": (z, w),
        "gating_moments": (z, w, T, g),
        "fisher_moment": (z, w),
        "pair_fourth_moment": (z[:, :6], y[:, :6]),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = {"python": _pykernels}
    try:
        backends["compiled"] = kernels.get_backend("compiled")
    except ImportError:
        print("compiled kernels not built; timing the python fallback only")

    cases = _cases(args.n, np.random.default_rng(0))
    print(f"n = {args.n}, best of {args.repeat}")
    print(f"{'kernel':<26}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, call_args in cases.items():
        times = {}
        for b, mod in backends.items():
            fn = getattr(mod, name)
            times[b] = min(timeit.repeat(lambda: fn(*call_args), number=1, repeat=args.repeat))
        ratio = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        print(f"{name:<26}" + "".join(f"{t * 1e3:>10.1f}ms" for t in times.values()) + f"{ratio:>9.2f}x")


if __name__ == "__main__":
    main()

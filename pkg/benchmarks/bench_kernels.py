"""Compare the compiled and numpy co-attention kernels.

    python3 benchmarks/bench_kernels.py [--pairs 256] [--repeat 20]

Times the fused per-pair forward and backward at the default training shape
(K=8, d=16, one 32x32 mini-batch of pairs) and the full ``coattention_raw`` op
with 1 and several threads.
"""

import argparse
import time

import numpy as np

from tcon import coattention as co
from tcon import kernels
from tcon import numerics as nx


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--pairs", type=int, default=256)
    parser.add_argument("--videos", type=int, default=32)
    parser.add_argument("--k", type=int, default=8)
    parser.add_argument("--dim", type=int, default=16)
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    fs = rng.normal(size=(args.videos, args.k, args.dim))
    ft = rng.normal(size=(args.videos, args.k, args.dim))
    ass = rng.dirichlet(np.ones(args.k), args.videos)
    att = rng.dirichlet(np.ones(args.k), args.videos)
    si = rng.integers(0, args.videos, args.pairs)
    ti = rng.integers(0, args.videos, args.pairs)
    g_raw = rng.normal(size=(args.pairs, args.k, args.k))

    print(f"pairs={args.pairs} K={args.k} d={args.dim}; best of {args.repeat}")
    print(f"{'backend':<10}{'forward ms':>12}{'backward ms':>13}")
    baseline = None
    for name in sorted(kernels.BACKENDS):
        ast, _ = kernels.pair_forward(fs, ft, ass, att, si, ti, backend=name)
        fwd = best_of(lambda: kernels.pair_forward(fs, ft, ass, att, si, ti, backend=name), args.repeat)
        bwd = best_of(lambda: kernels.pair_backward(fs, ft, ass, att, si, ti, ast, g_raw, backend=name),
                      args.repeat)
        note = ""
        if name == "python":
            baseline = (fwd, bwd)
        elif baseline is not None:
            note = f"   ({baseline[0] / fwd:.1f}x / {baseline[1] / bwd:.1f}x vs python)"
        print(f"{name:<10}{fwd * 1e3:>12.3f}{bwd * 1e3:>13.3f}{note}")

    print(f"\n{'op':<28}{'threads':>8}{'ms':>10}")
    for threads in (1, 2, 4):
        def step():
            a = nx.parameter(fs)
            b = nx.parameter(ft)
            with nx.Tape() as tape:
                raw, *_ = co.coattention_raw(a, b, si, ti, threads=threads)
                tape.backward(nx.sum(raw * g_raw), [a, b])
        print(f"{'coattention_raw fwd+bwd':<28}{threads:>8}{best_of(step, args.repeat) * 1e3:>10.3f}")
    print(f"\nactive backend: {kernels.BACKEND}")


if __name__ == "__main__":
    main()

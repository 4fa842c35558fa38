"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--n 20000] [--k 4] [--models 3] [--repeat 20]

Kernels are compiled (and cached) before timing starts.
"""
import argparse
import timeit

import numpy as np

from uad import _accel, kernels


def cases(n, k, n_models, rng):
    logits = rng.normal(scale=3, size=(n, k))
    correct = (rng.random(n) < 0.7).astype(np.float64)
    stack = rng.normal(scale=3, size=(n_models, n, k))
    temps = rng.uniform(0.3, 3.0, n_models)
    marg, gap = kernels.np_zoo_margins(stack, temps)
    vec = rng.normal(size=n)
    return {
        "softmax_rows": ((logits,), {}),
        "margin_gap_rows": ((logits, 1.7), {}),
        "ece_at": ((logits, correct, 1.7, 10), {}),
        "seq_sum": ((vec,), {}),
        "zoo_margins": ((stack, temps), {}),
        "select_cols": ((marg, gap), {}),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--k", type=int, default=4)
    ap.add_argument("--models", type=int, default=3)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return
    kernels.warmup()
    table = cases(args.n, args.k, args.models, np.random.default_rng(args.seed))
    print(f"n={args.n} K={args.k} models={args.models}, best of {args.repeat} runs")
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, (a, kw) in table.items():
        nb, npf = getattr(kernels, "nb_" + name), getattr(kernels, "np_" + name)
        nb(*a, **kw)
        t_nb = min(timeit.repeat(lambda: nb(*a, **kw), number=1, repeat=args.repeat))
        t_np = min(timeit.repeat(lambda: npf(*a, **kw), number=1, repeat=args.repeat))
        print(f"{name:<18}{t_nb * 1e3:>10.3f}{t_np * 1e3:>10.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()

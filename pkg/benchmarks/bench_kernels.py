"""Time the numpy and numba versions of each kernel on expert-sized inputs.

    python benchmarks/bench_kernels.py [--samples 2000] [--repeat 5]

The first numba call compiles (or loads from the on-disk cache); it is run
once before timing.
"""

import argparse
import time

import numpy as np

from moie import kernels
from moie.elen import ElenExpert


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(m, rng):
    e = ElenExpert.create(16, 4, 10, rng=rng)
    params = (e.attention_tilde(), e.w1, e.b1, e.w2, e.b2)
    x = rng.random((m, 16))
    pred = np.argmax(kernels.elen_logits_np(x, *params), axis=1)
    sizes = rng.integers(1, 5, 40)
    ptr = np.r_[0, np.cumsum(sizes)].astype(np.int64)
    idx = np.concatenate([rng.choice(16, s, replace=False) for s in sizes]).astype(np.int64)
    neg = rng.random(idx.size) < 0.5
    bools = rng.random((m, 16)) < 0.5
    pi = rng.random((m, 6)) * 0.6
    return {
        "elen_logits": ((x, *params), {}),
        "percentile_descent": ((x, pred, *params, 99), {}),
        "dnf_eval": ((idx, neg, ptr, bools), {}),
        "cascade_route": ((pi, 0.5), {}),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, (a, kw) in cases(args.samples, rng).items():
        np_fn = getattr(kernels, f"{name}_np")
        nb_fn = getattr(kernels, f"{name}_nb")
        nb_fn(*a, **kw)  # compile
        t_np = best_of(lambda: np_fn(*a, **kw), args.repeat)
        t_nb = best_of(lambda: nb_fn(*a, **kw), args.repeat)
        print(f"{name:<20}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()

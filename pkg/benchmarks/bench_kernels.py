"""Numba vs pure-numpy timing for the two hot kernels.

    python3 benchmarks/bench_kernels.py [--users 2000 --items 5000 --relations 4 --dim 10]

Reports the median wall time of one training-batch gradient and of scoring
a Setting-1 candidate block, plus the max absolute difference between the
backends so a speedup never hides a wrong answer.
"""

import argparse
import time

import numpy as np

from mohr import kernels
from mohr.model import ModelParams


def _median_time(fn, repeat):
    fn()  # warm-up, includes jit compile on first call
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def make_batches(rng, nu, ni, nr, n):
    seq = np.stack([rng.integers(nu, size=n), rng.integers(ni, size=n),
                    rng.integers(ni, size=n), rng.integers(ni, size=n)], 1)
    items = np.stack([rng.integers(ni, size=n), rng.integers(1, nr + 1, size=n),
                      rng.integers(ni, size=n), rng.integers(ni, size=n)], 1)
    rp = rng.integers(nr + 1, size=n)
    rn = (rp + rng.integers(1, nr + 1, size=n)) % (nr + 1)
    rels = np.stack([rng.integers(nu, size=n), rng.integers(ni, size=n), rp, rn], 1)
    return seq, items, rels


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--users", type=int, default=2000)
    ap.add_argument("--items", type=int, default=5000)
    ap.add_argument("--relations", type=int, default=4)
    ap.add_argument("--dim", type=int, default=10)
    ap.add_argument("--batch", type=int, default=512)
    ap.add_argument("--candidates", type=int, default=101)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    params = ModelParams.initialize(args.users, args.items, args.relations, args.dim, seed=0)
    params.item_bias[:] = rng.normal(0, 0.1, args.items)
    seq, items, rels = make_batches(rng, args.users, args.items, args.relations, args.batch)
    users = np.arange(args.users)
    ctx = rng.integers(args.items, size=args.users)
    cands = rng.integers(args.items, size=(args.users, args.candidates))

    results = {}
    for be in ("numba", "numpy"):
        kernels.set_backend(be)
        grads = params.zeros_like()

        def step():
            for a in grads.arrays().values():
                a[...] = 0.0
            return kernels.accumulate_gradients(params, grads, seq, items, rels, 1.0, 1.0, 0.1, False)

        t_grad = _median_time(step, args.repeat)
        step()
        g = {k: v.copy() for k, v in grads.arrays().items()}
        t_score = _median_time(lambda: kernels.score_candidates(params, users, ctx, cands), args.repeat)
        results[be] = (t_grad, t_score, g, kernels.score_candidates(params, users, ctx, cands))

    print(f"{'kernel':<22}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}{'max |diff|':>13}")
    gdiff = max(float(np.abs(results["numba"][2][k] - results["numpy"][2][k]).max())
                for k in results["numba"][2])
    sdiff = float(np.abs(results["numba"][3] - results["numpy"][3]).max())
    for name, k, diff in (("gradient (B=%d)" % args.batch, 0, gdiff),
                          ("score %dx%d" % (args.users, args.candidates), 1, sdiff)):
        tn, tp = results["numba"][k], results["numpy"][k]
        print(f"{name:<22}{tn * 1e3:>10.3f}{tp * 1e3:>10.3f}{tp / tn:>8.1f}x{diff:>13.2e}")


if __name__ == "__main__":
    main()

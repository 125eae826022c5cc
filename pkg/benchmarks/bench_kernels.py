"""Time one SGD mini-batch step: compiled kernel vs numpy fallback.

    python3 benchmarks/bench_kernels.py --items 500 --dim 100 --batch 128 --repeat 200
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from neatrec import kernels


def make_state(n_items: int, n_users: int, dim: int, seed: int):
    rng = np.random.default_rng(seed)
    means = rng.uniform(-0.5 / dim, 0.5 / dim, size=(n_items, dim))
    variances = np.ones(n_items)
    theta = rng.uniform(-0.5 / dim, 0.5 / dim, size=(n_users, dim))
    return means, variances, theta


def make_batches(rng, n_items, n_users, batch, negatives, bpr, count):
    out = []
    empty = np.empty(0, dtype=np.int64)
    for _ in range(count):
        q = rng.integers(0, n_items, batch)
        v = rng.integers(0, n_items, batch)
        neg = rng.integers(0, n_items, (batch, negatives))
        if bpr:
            out.append((q, v, neg, rng.integers(0, n_users, batch),
                        rng.integers(0, n_items, batch), rng.integers(0, n_items, batch)))
        else:
            out.append((q, v, neg, empty, empty, empty))
    return out


def time_backend(fn, state, batches, step):
    means, variances, theta = (a.copy() for a in state)
    slot = np.full(len(means), -1, dtype=np.int64)
    uslot = np.full(max(len(theta), 1), -1, dtype=np.int64)
    fn(means, variances, theta, *batches[0], 0.5, step, 1e-3, 10.0, slot, uslot)  # warm-up
    started = time.perf_counter()
    for b in batches:
        fn(means, variances, theta, *b, 0.5, step, 1e-3, 10.0, slot, uslot)
    return (time.perf_counter() - started) / len(batches), means


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--users", type=int, default=1000)
    p.add_argument("--dim", type=int, default=100)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--negatives", type=int, default=5)
    p.add_argument("--repeat", type=int, default=200)
    p.add_argument("--bpr", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    state = make_state(args.items, args.users, args.dim, args.seed)
    batches = make_batches(rng, args.items, args.users, args.batch, args.negatives, args.bpr, args.repeat)
    # a tiny step keeps the parameters in the regime seen early in training
    step = 1e-4

    py_t, py_means = time_backend(kernels.python_sgd_batch, state, batches, step)
    print(f"python    {py_t * 1e6:10.1f} us/batch")
    if kernels.compiled_sgd_batch is None:
        print("compiled  not built (pip install -e . to build the extension)")
        return
    c_t, c_means = time_backend(kernels.compiled_sgd_batch, state, batches, step)
    print(f"compiled  {c_t * 1e6:10.1f} us/batch")
    print(f"speedup   {py_t / c_t:10.2f}x")
    print(f"max |means difference| after {args.repeat} batches: {np.abs(py_means - c_means).max():.2e}")


if __name__ == "__main__":
    main()

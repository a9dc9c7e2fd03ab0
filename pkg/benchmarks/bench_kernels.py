"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--chains 20000] [--repeats 5]

Reports the best-of-``repeats`` wall time of each backend and the maximum
absolute difference between their outputs.
"""

import argparse
import time

import numpy as np

from fedmbo import backend
from fedmbo.hypergradient import phe_chains
from fedmbo.inner_solver import InnerConfig, minibatch_sgd_lower
from fedmbo.problems import generate_quadratic_family


def best_time(fn, repeats):
    best, out = float("inf"), None
    for _ in range(repeats):
        start = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - start)
    return best, out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--chains", type=int, default=20000)
    parser.add_argument("--depth", type=int, default=10)
    parser.add_argument("--inner-steps", type=int, default=200)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args(argv)
    if not backend.compiled_available():
        print("compiled extension not built; nothing to compare")
        return 1

    fam = generate_quadratic_family(10, 4, 8, 10, 1.0, 4.0, 1.0, seed=0)
    x, y = np.ones(fam.p), np.zeros(fam.q)
    ks = np.arange(args.chains)
    slots = np.zeros(args.chains, dtype=np.int64)
    inner = InnerConfig(T=args.inner_steps, S=4, n=8, beta=0.1)
    cases = [
        (f"phe_chains ({args.chains} chains, N={args.depth})",
         lambda name: phe_chains(fam, x, y, args.depth, ks, slots, 0, backend_name=name)[0]),
        (f"minibatch_sgd_lower (T={args.inner_steps}, n=8, S=4)",
         lambda name: minibatch_sgd_lower(fam, x, y, inner, 0, backend_name=name).y),
    ]
    print(f"{'kernel':45s} {'compiled':>10s} {'python':>10s} {'speedup':>8s} {'max diff':>9s}")
    for label, fn in cases:
        t_c, out_c = best_time(lambda: fn("compiled"), args.repeats)
        t_p, out_p = best_time(lambda: fn("python"), args.repeats)
        diff = float(np.max(np.abs(out_c - out_p)))
        print(f"{label:45s} {t_c * 1e3:8.2f}ms {t_p * 1e3:8.2f}ms {t_p / t_c:7.1f}x {diff:9.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

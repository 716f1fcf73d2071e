"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best-of-N wall time of each backend,
the speed-up, and the max absolute difference between their outputs.
"""
import argparse
import time

import numpy as np

from norlab import datagen
from norlab.kernels import BACKENDS
from norlab.model import FLOOR_A


def best_time(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def cases():
    rng = np.random.default_rng(0)
    p = datagen.gen_patterned(datagen.syn_pattern_spec(0))
    X = datagen.sample_dataset(p, 500, seed=1).x.astype(float)
    lmu = np.ascontiguousarray(p.logit_mu)

    K = 14
    D = 40
    th = rng.gamma(0.5, 1.0, (D, K))
    th0 = rng.uniform(FLOOR_A, 0.3, D)
    mu = rng.uniform(0.05, 0.5, K)
    x = (rng.random(D) < 0.4).astype(float)
    pos = x > 0.5
    q = rng.uniform(0, 1, K)

    rows, dims = np.nonzero(X > 0.5)
    M = rows.size
    Q = rng.uniform(0, 1, (M, p.K))

    yield ("enum_posterior K=14", lambda kb: kb.enum_posterior(
        th, th0, np.log(mu), np.log1p(-mu), x, False)[0])
    yield ("enum_expected_positive K=14", lambda kb: kb.enum_expected_positive(
        np.ascontiguousarray(th[pos]), np.ascontiguousarray(th0[pos]), q))
    yield ("ub_prior_psi D=64", lambda kb: kb.ub_prior_psi(p.theta, p.theta0, lmu))
    yield ("ub_sweep N=500 D=64", lambda kb: kb.ub_sweep(
        p.theta, p.theta0, lmu, X, np.ones_like(X)).copy())
    yield (f"lb_tighten M={M}", lambda kb: kb.lb_tighten(
        np.ascontiguousarray(p.theta[dims]), np.ascontiguousarray(p.theta0[dims]), Q,
        np.full((M, p.K), 1.0 / p.K), 1e-12, 200)[0][-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if "cython" not in BACKENDS:
        print("compiled backend not available; only the numpy fallback is installed")
        return
    print(f"{'kernel':32s} {'numpy s':>10s} {'cython s':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, fn in cases():
        tp, outp = best_time(lambda: fn(BACKENDS["python"]), args.repeat)
        tc, outc = best_time(lambda: fn(BACKENDS["cython"]), args.repeat)
        diff = float(np.max(np.abs(np.asarray(outp) - np.asarray(outc))))
        print(f"{name:32s} {tp:10.4f} {tc:10.4f} {tp / tc:8.1f} {diff:10.2e}")


if __name__ == "__main__":
    main()

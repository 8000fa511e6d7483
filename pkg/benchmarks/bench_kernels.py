#!/usr/bin/env python3
"""Compare the numba and numpy paths of the hot kernels.

Each kernel runs once per backend to warm up (numba compiles on first
call), then ``--repeat`` timed calls; outputs are checked for equality.
With ``--end-to-end`` a cross-fitted forest estimate is also timed in two
subprocesses, one with EXCURSIONLAB_DISABLE_NUMBA=1.

    python benchmarks/bench_kernels.py --rows 4000 --repeat 3
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from excursionlab import _accel, kernels


def timed(fn, repeat):
    fn()  # warm-up / compile
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def forest_case(rows, n_trees, rng):
    X = rng.uniform(-2, 2, (rows, 2))
    y = np.sin(X[:, 0]) + X[:, 1] + rng.normal(size=rows)
    m = int(0.8 * rows)
    samples = np.stack([np.sort(rng.permutation(rows)[:m]) for _ in range(n_trees)])

    def run(backend):
        forest = kernels.grow_forest(X, y, samples, 6, 5, backend=backend)
        return kernels.predict_forest(X, forest, backend=backend)

    return run


def knn_case(rows, rng):
    X = rng.normal(size=(rows, 3))
    y = X.sum(axis=1)
    Q = rng.normal(size=(rows // 2, 3))
    return lambda backend: kernels.knn_predict(X, y, Q, 10, backend=backend)


def meat_case(n, T, p, rng):
    rows = rng.normal(size=(n, T, p))
    resid = rng.normal(size=(n, T))
    dresid = rng.normal(size=(n, T, p)) * 0.1
    bread_inv = np.linalg.inv(np.eye(p) * 2.0 + 0.1 * rng.normal(size=(p, p)))
    w = np.ones(n)

    def run(backend):
        meat, _ = kernels.leverage_corrected_meat(rows, resid, dresid, bread_inv, w, n, backend=backend)
        return meat

    return run


SCRIPT = """
import time, warnings
warnings.simplefilter("ignore")
from excursionlab import TwoStageCF, estimate
from excursionlab._accel import backend_name
from excursionlab.nuisance import Forest
from excursionlab.simgen import ContinuousConfig, generate
P, _ = generate(ContinuousConfig(n={n}, form="periodic", lam1=2.0))
m = TwoStageCF(Forest(n_trees=100))
estimate(P, m)
t0 = time.perf_counter()
r = estimate(P, m)
print(backend_name(), time.perf_counter() - t0, r.beta[0])
"""


def end_to_end(n):
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, EXCURSIONLAB_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", SCRIPT.format(n=n)], env=env, capture_output=True,
                             text=True, check=True)
        name, secs, beta = res.stdout.split()
        out[name] = (float(secs), float(beta))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=4000)
    ap.add_argument("--trees", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--end-to-end", action="store_true")
    ap.add_argument("--n", type=int, default=200, help="trajectories for the end-to-end run")
    args = ap.parse_args(argv)

    if not _accel.NUMBA_AVAILABLE:
        sys.exit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    cases = {
        f"forest ({args.trees} trees, {args.rows} rows)": forest_case(args.rows, args.trees, rng),
        f"knn (k=10, {args.rows} rows)": knn_case(args.rows, rng),
        "corrected meat (n=2000, T=30, p=3)": meat_case(2000, 30, 3, rng),
    }
    print(f"{'kernel':42s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s}  match")
    for name, run in cases.items():
        t_np, out_np = timed(lambda: run("numpy"), args.repeat)
        t_nb, out_nb = timed(lambda: run("numba"), args.repeat)
        match = np.allclose(out_np, out_nb, rtol=1e-12, atol=1e-12)
        print(f"{name:42s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.1f}  {match}")

    if args.end_to_end:
        res = end_to_end(args.n)
        (t_nb, b_nb), (t_np, b_np) = res["numba"], res["numpy"]
        print(f"\ncross-fitted forest estimate, n={args.n}: numpy {t_np:.2f}s, numba {t_nb:.2f}s, "
              f"speedup {t_np / t_nb:.1f}x, same estimate: {b_np == b_nb}")


if __name__ == "__main__":
    main()

"""Time the compiled and numpy likelihood kernels on survey-sized data.

    python benchmarks/bench_kernels.py [--n 1510] [--repeat 200]

Prints one row per (kernel, derivative order) with the median time of each
backend and the speed ratio, then times a full joint CF-MLE fit per backend.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from stratpart import kernels


def make_data(n, p, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(0, 0.15, n), (rng.random((n, p - 2)) < 0.2).astype(float)])
    z = (rng.random(n) < 2 / 3).astype(float)
    c = (rng.random(n) < 0.4).astype(float)
    W = np.column_stack([np.ones(n), z, c, z * c])
    db = X[:, 1]
    y = (rng.random(n) < 0.11).astype(float)
    params = np.concatenate([rng.normal(0, 0.1, p), rng.normal(0, 0.05, 4), [np.log(0.14), 0.4]])
    return X, W, y, db, params


def median_time(fn, repeat):
    t = timeit.repeat(fn, number=1, repeat=repeat)
    return float(np.median(t))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=1510)
    ap.add_argument("--p", type=int, default=14)
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the numpy fallback is available")
    X, W, y, db, params = make_data(args.n, args.p)
    w = np.ones(args.n)
    print(f"n={args.n}, probit columns={args.p}, joint parameters={params.size}", flush=True)
    print(f"{'kernel':<12}{'order':>6}" + "".join(f"{b + ' (ms)':>14}" for b in backends) + f"{'speed-up':>10}")
    for name in ("probit", "cf_joint"):
        for order in (0, 1, 2):
            row = []
            for b in backends:
                k = kernels.get_backend(b)
                if name == "probit":
                    fn = lambda k=k: k.probit_derivs(X, y, w, params[: args.p], order)
                else:
                    fn = lambda k=k: k.cf_joint_derivs(X, W, y, db, w, params, order)
                row.append(median_time(fn, args.repeat) * 1e3)
            ratio = row[0] / row[-1] if len(row) > 1 else float("nan")
            print(f"{name:<12}{order:>6}" + "".join(f"{v:>14.3f}" for v in row) + f"{ratio:>10.2f}", flush=True)

    # end-to-end fit, one subprocess per backend so the selection at import applies
    code = (
        "import time, warnings; warnings.simplefilter('ignore');"
        "from stratpart import kernels, generate_population, paper2019, fit_cf_joint_mle;"
        "ds = generate_population(paper2019(3)).dataset; fit_cf_joint_mle(ds);"
        "t = time.perf_counter();"
        "[fit_cf_joint_mle(ds) for _ in range(20)];"
        "print(f'{kernels.BACKEND:<8} joint CF-MLE fit: {(time.perf_counter() - t) / 20 * 1e3:.1f} ms')"
    )
    for b in backends:
        env = dict(os.environ, STRATPART_BACKEND=b)
        subprocess.run([sys.executable, "-c", code], env=env, check=True)


if __name__ == "__main__":
    main()

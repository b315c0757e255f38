"""Time the compiled and numpy linear-algebra backends on scorer-sized problems.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints a median time per call for each kernel and backend, and the speedup of
the compiled backend when both are available.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from snmnet import linalg


def _spd(rng, d):
    A = rng.standard_normal((d, d))
    return A @ A.T / d + np.eye(d)


def cases(rng):
    out = []
    for d in (8, 32, 128):
        A = _spd(rng, d)
        L = np.linalg.cholesky(A)
        mu = rng.standard_normal(d)
        F = rng.standard_normal((512, d))
        X = rng.standard_normal((256, d))
        b = rng.standard_normal(d)
        out += [
            (f"cholesky d={d}", lambda A=A: linalg.cholesky(A)),
            (f"solve_lower d={d}", lambda L=L, b=b: linalg.solve_lower(L, b)),
            (f"mahalanobis_rows 512xd={d}", lambda L=L, mu=mu, F=F: linalg.mahalanobis_rows(L, mu, F)),
            (f"sample_covariance 256xd={d}", lambda X=X: linalg.sample_covariance(X, X.mean(axis=0))),
        ]
    return out


def time_call(fn, repeat: int) -> float:
    fn()  # warm-up
    runs = []
    for _ in range(repeat):
        n, t0 = 0, time.perf_counter()
        while True:
            fn()
            n += 1
            elapsed = time.perf_counter() - t0
            if elapsed > 0.05:
                break
        runs.append(elapsed / n)
    return statistics.median(runs)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    backends = linalg.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; timing the numpy backend only")
    results: dict[str, dict[str, float]] = {}
    for backend in backends:
        linalg.use_backend(backend)
        for name, fn in cases(np.random.default_rng(0)):
            results.setdefault(name, {})[backend] = time_call(fn, args.repeat)
    header = f"{'kernel':<30}" + "".join(f"{b + ' (us)':>16}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for name, row in results.items():
        line = f"{name:<30}" + "".join(f"{row[b] * 1e6:>16.2f}" for b in backends)
        if len(backends) == 2:
            line += f"{row['python'] / row['compiled']:>9.1f}x"
        print(line)
    linalg.use_backend(backends[0] if "compiled" not in backends else "compiled")


if __name__ == "__main__":
    main()

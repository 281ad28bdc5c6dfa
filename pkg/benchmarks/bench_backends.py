"""Compare the compiled backend against the pure-Python fallback.

Times the three hot kernels (pairwise squared distances, Cholesky
factorization, triangular solve) and one end-to-end task adaptation at a
few sizes. Run from the repo root:

    python3 benchmarks/bench_backends.py
"""

import time

import numpy as np

from metafn import backend
from metafn.inner_kernel import KernelParams, adapt
from metafn.tasks import TaskDistribution, sample_episode


def timeit(fn, repeats=20):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def random_spd(n, rng):
    a = rng.standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


def main():
    impls = backend.available_backends()
    print(f"backends: {', '.join(impls)} (active: {backend.BACKEND_NAME})")
    rng = np.random.default_rng(0)

    header = f"{'kernel':<22}{'size':<14}" + "".join(f"{n:>12}" for n in impls) + f"{'speedup':>10}"
    print(header)
    print("-" * len(header))

    def row(label, size, fns):
        times = {name: timeit(fn) for name, fn in fns.items()}
        cols = "".join(f"{times[n] * 1e6:>10.1f}us" for n in impls)
        ratio = times["python"] / times["cython"] if {"python", "cython"} <= set(times) else float("nan")
        print(f"{label:<22}{size:<14}{cols}{ratio:>9.1f}x")

    for n, m, d in [(25, 25, 2), (100, 100, 32), (400, 400, 64)]:
        a, b = rng.standard_normal((n, d)), rng.standard_normal((m, d))
        row("pairwise_sq_dists", f"{n}x{m} d={d}",
            {name: (lambda impl=impl: impl.pairwise_sq_dists(a, b)) for name, impl in impls.items()})

    for n in (25, 100, 400):
        spd = random_spd(n, rng)
        row("cholesky_lower", f"n={n}",
            {name: (lambda impl=impl: impl.cholesky_lower(spd)) for name, impl in impls.items()})
        lows = {name: impl.cholesky_lower(spd) for name, impl in impls.items()}
        rhs = rng.standard_normal(n)
        row("cho_solve", f"n={n}",
            {name: (lambda impl=impl, low=lows[name]: impl.cho_solve(low, rhs))
             for name, impl in impls.items()})

    # end-to-end: one kernel task adaptation (embedding off, raw inputs)
    dist = TaskDistribution(kind="sinusoid", seed=0)
    ep = sample_episode(dist, 1, 20, 15, rng)
    kp = KernelParams()

    import metafn.backend as b

    def with_backend(impl):
        def run():
            saved = (b.pairwise_sq_dists, b.cholesky_lower, b.cho_solve)
            b.pairwise_sq_dists = impl.pairwise_sq_dists
            b.cholesky_lower = impl.cholesky_lower
            b.cho_solve = impl.cho_solve
            try:
                adapt(ep, kp)
            finally:
                b.pairwise_sq_dists, b.cholesky_lower, b.cho_solve = saved

        return run

    row("adapt (end-to-end)", "n=20",
        {name: with_backend(impl) for name, impl in impls.items()})


if __name__ == "__main__":
    main()

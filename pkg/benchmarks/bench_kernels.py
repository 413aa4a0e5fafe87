"""Heat-bath kernel timing: numba vs the numpy fallback.

    python3 benchmarks/bench_kernels.py [--sizes 54 99 200] [--sweeps 200]

Both backends get the same couplings and uniforms; the script checks that the
chains agree bit for bit before reporting times (best of ``--repeat``).
"""

import argparse
import time

import numpy as np

from z2sync import _accel
from z2sync._kernels import heat_bath_sweeps


def make_problem(n, sweeps, seed=0):
    rng = np.random.default_rng(seed)
    J = rng.normal(scale=0.3, size=(n, n))
    J = np.triu(J, 1)
    J = J + J.T
    h = rng.normal(scale=0.1, size=n)
    spins = np.where(rng.random(n) < 0.5, 1, -1).astype(np.int8)
    uniforms = rng.random((sweeps, n))
    return J, h, spins, uniforms


def run(backend, J, h, spins0, uniforms):
    spins = spins0.copy()
    fields = J @ spins + h
    trace = np.empty((len(uniforms), len(spins)), dtype=np.int8)
    heat_bath_sweeps(J, fields, spins, uniforms, np.ones(len(uniforms)), trace, backend=backend)
    return trace


def best_time(backend, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        run(backend, *args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[54, 99, 200])
    ap.add_argument("--sweeps", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    if _accel.numba is None:
        print("numba is not importable; only the numpy backend can run")
        return 1
    print(f"default backend: {_accel.backend()}")
    print(f"{'sites':>6} {'sweeps':>7} {'numpy s':>10} {'numba s':>10} {'speedup':>8}")
    for n in args.sizes:
        prob = make_problem(n, args.sweeps)
        a, b = run("numpy", *prob), run("numba", *prob)  # also compiles numba
        if not np.array_equal(a, b):
            raise SystemExit(f"backends disagree at n={n}")
        t_np = best_time("numpy", prob, args.repeat)
        t_nb = best_time("numba", prob, args.repeat)
        print(f"{n:>6} {args.sweeps:>7} {t_np:>10.4f} {t_nb:>10.4f} {t_np / t_nb:>8.1f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

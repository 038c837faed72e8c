"""Timing of the compiled and pure-numpy inner loops.

    python3 benchmarks/bench_kernels.py [--sizes 1000 10000 50000] [--repeat 3]

Prints one row per kernel and size.  The last block times a short gyre
ensemble end to end in two subprocesses, one per value of ``MRMEMORY_NUMBA``,
since the switch is read once at import.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mrmemory import _kernels, quadrature

ENSEMBLE_SNIPPET = """
import time
import numpy as np
from mrmemory import experiments as ex
from mrmemory.config import ExperimentConfig
from mrmemory.flow import FieldBounds
from mrmemory.solver import simulate_ensemble
cfg = ExperimentConfig().replace("solver", dt=0.02, tau_end={tau_end})
fields = ex.build_fields(cfg, 1.0)
bounds = FieldBounds.from_constants(0.3204, 0.1208, 1.4237)
y0s = ex.release_lattice(cfg)
# warm-up run compiles the kernels
simulate_ensemble(fields, y0s[:1], np.array(cfg.ensemble.w0), ex.solver_config(cfg, tau_end=1.0), bounds)
start = time.perf_counter()
simulate_ensemble(fields, y0s, np.array(cfg.ensemble.w0), ex.solver_config(cfg), bounds)
print(time.perf_counter() - start)
"""


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_convolution(sizes, repeat, rng):
    rows = []
    for n in sizes:
        w = quadrature.abel_weights(n, 0.01)
        g = rng.normal(size=n + 1)
        args = (w.k_int, w.k_end, w.k_diag, g)
        _kernels.product_convolve_numba(*args)  # compile outside the timing
        rows.append(("product_convolve", n, best_of(lambda: _kernels.product_convolve_numba(*args), repeat),
                     best_of(lambda: _kernels.product_convolve_numpy(*args), repeat)))
    return rows


def bench_history(sizes, repeat, rng, columns=30):
    """A full sweep ``n = 1..N`` of history sums, as one solver run performs."""
    rows = []
    for n in sizes:
        w = quadrature.abel_weights(n, 0.01)
        hist = rng.normal(size=(n + 1, columns))
        out = np.empty(columns)

        def sweep(fn):
            for m in range(1, n + 1):
                fn(w.k_int, w.k_end, hist, m, out)

        _kernels.history_sum_numba(w.k_int, w.k_end, hist, 1, out)
        rows.append(("history_sweep", n, best_of(lambda: sweep(_kernels.history_sum_numba), repeat),
                     best_of(lambda: sweep(_kernels.history_sum_numpy), repeat)))
    return rows


def bench_ensemble(tau_end):
    times = {}
    for flag in ("1", "0"):
        env = dict(os.environ, MRMEMORY_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", ENSEMBLE_SNIPPET.format(tau_end=tau_end)],
                             env=env, capture_output=True, text=True, check=True)
        times[flag] = float(res.stdout.strip().splitlines()[-1])
    return ("ensemble_15x_gyre", int(round(tau_end / 0.02)), times["1"], times["0"])


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[1000, 10000, 50000])
    parser.add_argument("--history-sizes", type=int, nargs="+", default=[1000, 5000])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--ensemble-tau", type=float, default=40.0)
    args = parser.parse_args(argv)
    if not _kernels.NUMBA_AVAILABLE:
        sys.exit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    rows = bench_convolution(args.sizes, args.repeat, rng)
    rows += bench_history(args.history_sizes, args.repeat, rng)
    rows.append(bench_ensemble(args.ensemble_tau))
    print(f"{'kernel':20s} {'N':>7s} {'numba [s]':>11s} {'numpy [s]':>11s} {'speedup':>8s}")
    for name, n, t_numba, t_numpy in rows:
        print(f"{name:20s} {n:7d} {t_numba:11.4f} {t_numpy:11.4f} {t_numpy / t_numba:8.1f}")


if __name__ == "__main__":
    main()

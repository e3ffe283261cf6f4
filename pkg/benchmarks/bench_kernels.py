"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeats 5] [--users 3]

Both twins run on identical value tables built from random scenarios, and
the script checks that they agree before timing anything.  The first numba
call (compilation, or loading the on-disk cache) is reported separately.
"""

import argparse
import time

import numpy as np

from aigc_alloc import kernels
from aigc_alloc.baselines import _caps, default_r_levels, value_table
from aigc_alloc.scenario import default_sampler, sample_scenario


def grid_args(sc):
    r = default_r_levels()
    bw_cap, comp_cap = _caps(sc)
    comp_cost = sc.step_compute_cost * np.arange(1, sc.max_diffusion_step + 1, dtype=np.float64)
    return value_table(sc, r), sc.max_bitrate * r, comp_cost, bw_cap, comp_cap


def knapsack_args(sc, r_step=0.1):
    r = default_r_levels(r_step)
    bw_units = np.round(r / r_step).astype(np.int64)
    comp_units = np.arange(1, sc.max_diffusion_step + 1, dtype=np.int64)
    bw_cap = int(sc.bandwidth_budget / (sc.max_bitrate * r_step))
    comp_cap = int(sc.compute_budget / sc.step_compute_cost)
    return value_table(sc, r), bw_units, comp_units, bw_cap, comp_cap


def best_of(fn, args, repeats):
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--users", type=int, default=3, help="user count for the grid kernel")
    ap.add_argument("--dp-users", type=int, default=6, help="user count for the knapsack kernel")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    cases = [
        ("grid search", kernels.grid_search_jit, kernels.grid_search_np,
         grid_args(sample_scenario(rng, default_sampler(args.users))), args.users),
        ("knapsack", kernels.knapsack_jit, kernels.knapsack_np,
         knapsack_args(sample_scenario(rng, default_sampler(args.dp_users))), args.dp_users),
    ]

    print(f"{'kernel':<12} {'N':>2} {'first jit call':>15} {'jit':>10} {'numpy':>10} {'speedup':>8}")
    for name, jit_fn, np_fn, fn_args, n in cases:
        t0 = time.perf_counter()
        ref = jit_fn(*fn_args)
        first = time.perf_counter() - t0
        other = np_fn(*fn_args)
        if ref[0] != other[0]:
            raise SystemExit(f"{name}: twins disagree ({ref[0]} vs {other[0]})")
        t_jit = best_of(jit_fn, fn_args, args.repeats)
        t_np = best_of(np_fn, fn_args, args.repeats)
        print(f"{name:<12} {n:>2} {first:>14.3f}s {t_jit * 1e3:>8.2f}ms {t_np * 1e3:>8.2f}ms "
              f"{t_np / t_jit:>7.1f}x")


if __name__ == "__main__":
    main()

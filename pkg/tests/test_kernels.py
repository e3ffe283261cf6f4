import itertools

import numpy as np
import pytest

from aigc_alloc import kernels
from aigc_alloc._jit import JIT_ENABLED


def random_problem(rng, n, R=4, T=3):
    value = rng.normal(size=(n, R, T))
    bw_cost = np.sort(rng.uniform(1, 5, size=R))
    comp_cost = np.arange(1, T + 1, dtype=np.float64)
    bw_cap = float(rng.uniform(bw_cost[0] * n, bw_cost[-1] * n))
    comp_cap = float(rng.integers(n, T * n + 1))
    return value, bw_cost, comp_cost, bw_cap, comp_cap


def brute(value, bw_cost, comp_cost, bw_cap, comp_cap, tol=kernels.TIE_TOL):
    """Reference enumeration in lexicographic (a_1..a_N, b_1..b_N) order."""
    n, R, T = value.shape
    pts = []
    for idx in itertools.product(*([range(R)] * n + [range(T)] * n)):
        a, b = idx[:n], idx[n:]
        if sum(bw_cost[x] for x in a) <= bw_cap and sum(comp_cost[y] for y in b) <= comp_cap:
            pts.append((sum(value[i, a[i], b[i]] for i in range(n)), idx))
    best = max(v for v, _ in pts)
    ties = [idx for v, idx in pts if v >= best - tol]
    return best, np.array(ties[0]), len(ties), len(pts)


@pytest.mark.parametrize("n", [1, 2, 3])
@pytest.mark.parametrize("impl", ["np", "jit"])
def test_grid_search_matches_brute_force(n, impl):
    rng = np.random.default_rng(10 + n)
    fn = kernels.grid_search_np if impl == "np" else kernels.grid_search_jit
    for _ in range(5):
        prob = random_problem(rng, n)
        best, first, ties, n_feas = fn(*prob)
        rb, rfirst, rties, rfeas = brute(*prob)
        assert best == pytest.approx(rb, abs=1e-12)
        np.testing.assert_array_equal(first, rfirst)
        assert (ties, n_feas) == (rties, rfeas)


def test_grid_ties_counted():
    value = np.zeros((2, 2, 2))
    best, first, ties, n_feas = kernels.grid_search(value, np.ones(2), np.ones(2), 10.0, 10.0)
    assert best == 0.0 and ties == 16 and n_feas == 16
    assert first.tolist() == [0, 0, 0, 0]


def test_grid_lead_partition_is_additive():
    rng = np.random.default_rng(3)
    prob = random_problem(rng, 3, R=5)
    best_all, n_all = kernels.grid_max(*prob, 0, 5)
    halves = [kernels.grid_max(*prob, 0, 2), kernels.grid_max(*prob, 2, 5)]
    assert max(b for b, _ in halves) == best_all
    assert sum(n for _, n in halves) == n_all


@pytest.mark.parametrize("impl", ["np", "jit"])
def test_knapsack_matches_brute_force(impl):
    rng = np.random.default_rng(4)
    fn = kernels.knapsack_np if impl == "np" else kernels.knapsack_jit
    for n in (1, 2, 3):
        for _ in range(4):
            R, T = 4, 3
            value = rng.normal(size=(n, R, T))
            bw_units = np.arange(1, R + 1, dtype=np.int64)
            comp_units = np.arange(1, T + 1, dtype=np.int64)
            bw_cap, comp_cap = int(rng.integers(n, R * n + 1)), int(rng.integers(n, T * n + 1))
            best, _ = fn(value, bw_units, comp_units, bw_cap, comp_cap)
            ref, _, _, _ = brute(value, bw_units.astype(float), comp_units.astype(float),
                                 bw_cap, comp_cap)
            assert best == pytest.approx(ref, abs=1e-12)


def test_knapsack_levels_achieve_best():
    rng = np.random.default_rng(5)
    value = rng.normal(size=(4, 5, 4))
    bw_units = np.arange(1, 6)
    comp_units = np.arange(1, 5)
    best, levels = kernels.knapsack(value, bw_units, comp_units, 11, 9)
    assert sum(value[i, a, b] for i, (a, b) in enumerate(levels)) == pytest.approx(best, abs=1e-12)
    assert bw_units[levels[:, 0]].sum() <= 11 and comp_units[levels[:, 1]].sum() <= 9


def test_knapsack_infeasible():
    best, levels = kernels.knapsack(np.zeros((3, 2, 2)), np.array([2, 3]), np.array([1, 2]), 5, 10)
    assert best == -np.inf and levels is None


def test_twins_agree_exactly():
    rng = np.random.default_rng(6)
    prob = random_problem(rng, 3, R=6, T=5)
    a = kernels.grid_search_np(*prob)
    b = kernels.grid_search_jit(*prob)
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])
    assert a[2:] == b[2:]


def test_backend_flag_is_boolean():
    assert isinstance(JIT_ENABLED, bool)

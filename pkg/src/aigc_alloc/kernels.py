"""Hot loops of the oracle solvers.

Each kernel exists twice: a numba loop (``*_jit``) and a vectorised numpy
version (``*_np``).  The public name dispatches on ``JIT_ENABLED``; both twins
stay importable so tests and the benchmark can compare them directly.

Layout conventions shared by all kernels:

``value[i, a, b]``
    reward contribution of user ``i`` at ratio level ``a`` and diffusion step
    ``b + 1`` (QoE minus weighted threshold shortfall).
``bw_cost[a]``, ``comp_cost[b]``
    resource use of one user at those levels.

Grid points are ordered lexicographically over
``(a_1, ..., a_N, b_1, ..., b_N)`` with ``a_1`` most significant.
"""

import numpy as np

from ._jit import JIT_ENABLED, njit

TIE_TOL = 1e-9


# --------------------------------------------------------------------------
# exhaustive enumeration
# --------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _grid_max_jit(value, bw_cost, comp_cost, bw_cap, comp_cap, lead_lo, lead_hi):
    n, R, T = value.shape
    digits = np.zeros(2 * n, dtype=np.int64)
    best = -np.inf
    n_feasible = 0
    for lead in range(lead_lo, lead_hi):
        digits[:] = 0
        digits[0] = lead
        while True:
            bw = 0.0
            cp = 0.0
            v = 0.0
            for i in range(n):
                a = digits[i]
                b = digits[n + i]
                bw += bw_cost[a]
                cp += comp_cost[b]
                v += value[i, a, b]
            if bw <= bw_cap and cp <= comp_cap:
                n_feasible += 1
                if v > best:
                    best = v
            # increment mixed-radix counter, leaving digit 0 fixed
            pos = 2 * n - 1
            while pos >= 1:
                digits[pos] += 1
                radix = R if pos < n else T
                if digits[pos] < radix:
                    break
                digits[pos] = 0
                pos -= 1
            if pos < 1:
                break
    return best, n_feasible


@njit(cache=True, nogil=True)
def _grid_ties_jit(value, bw_cost, comp_cost, bw_cap, comp_cap, lead_lo, lead_hi, best, tol):
    n, R, T = value.shape
    digits = np.zeros(2 * n, dtype=np.int64)
    first = np.full(2 * n, -1, dtype=np.int64)
    ties = 0
    for lead in range(lead_lo, lead_hi):
        digits[:] = 0
        digits[0] = lead
        while True:
            bw = 0.0
            cp = 0.0
            v = 0.0
            for i in range(n):
                a = digits[i]
                b = digits[n + i]
                bw += bw_cost[a]
                cp += comp_cost[b]
                v += value[i, a, b]
            if bw <= bw_cap and cp <= comp_cap and v >= best - tol:
                if ties == 0:
                    first[:] = digits
                ties += 1
            pos = 2 * n - 1
            while pos >= 1:
                digits[pos] += 1
                radix = R if pos < n else T
                if digits[pos] < radix:
                    break
                digits[pos] = 0
                pos -= 1
            if pos < 1:
                break
    return first, ties


def _grid_block_np(value, bw_cost, comp_cost, lead):
    """Dense (value, bw, comp) arrays for every grid point with a_1 = lead."""
    n, R, T = value.shape
    shape = (R,) * (n - 1) + (T,) * n
    v = np.zeros(shape)
    bw = np.full(shape, bw_cost[lead])
    cp = np.zeros(shape)
    for i in range(n):
        # axis of a_i (absent for i == 0) and of b_i
        b_axis = (n - 1) + i
        if i == 0:
            sl = [1] * len(shape)
            sl[b_axis] = T
            v = v + value[0, lead, :].reshape(sl)
        else:
            a_axis = i - 1
            sl = [1] * len(shape)
            sl[a_axis] = R
            sl[b_axis] = T
            v = v + value[i].reshape(sl)
            sl_a = [1] * len(shape)
            sl_a[a_axis] = R
            bw = bw + bw_cost.reshape(sl_a)
        sl_b = [1] * len(shape)
        sl_b[b_axis] = T
        cp = cp + comp_cost.reshape(sl_b)
    return v, bw, cp


def _unravel(flat, n, R, T):
    dims = (R,) * (n - 1) + (T,) * n
    return np.array(np.unravel_index(flat, dims), dtype=np.int64)


def grid_search_np(value, bw_cost, comp_cost, bw_cap, comp_cap, lead_lo=None, lead_hi=None,
                   tol=TIE_TOL):
    n, R, T = value.shape
    lead_lo = 0 if lead_lo is None else lead_lo
    lead_hi = R if lead_hi is None else lead_hi
    best = -np.inf
    n_feasible = 0
    blocks = []
    for lead in range(lead_lo, lead_hi):
        # accumulation order matches the loop kernel: user 0 first
        v, bw, cp = _grid_block_np(value, bw_cost, comp_cost, lead)
        feas = (bw <= bw_cap) & (cp <= comp_cap)
        n_feasible += int(feas.sum())
        if feas.any():
            best = max(best, float(v[feas].max()))
        blocks.append((lead, v, feas))
    first = np.full(2 * n, -1, dtype=np.int64)
    ties = 0
    for lead, v, feas in blocks:
        mask = feas & (v >= best - tol)
        k = int(mask.sum())
        if k and ties == 0:
            rest = _unravel(int(np.flatnonzero(mask.ravel())[0]), n, R, T)
            first = np.concatenate([[lead], rest]).astype(np.int64)
        ties += k
    return best, first, ties, n_feasible


def grid_search_jit(value, bw_cost, comp_cost, bw_cap, comp_cap, lead_lo=None, lead_hi=None,
                    tol=TIE_TOL):
    n, R, T = value.shape
    lead_lo = 0 if lead_lo is None else lead_lo
    lead_hi = R if lead_hi is None else lead_hi
    best, n_feasible = _grid_max_jit(value, bw_cost, comp_cost, bw_cap, comp_cap, lead_lo, lead_hi)
    first, ties = _grid_ties_jit(value, bw_cost, comp_cost, bw_cap, comp_cap, lead_lo, lead_hi,
                                 best, tol)
    return best, first, ties, n_feasible


def grid_max(value, bw_cost, comp_cost, bw_cap, comp_cap, lead_lo, lead_hi):
    """Pass 1: best feasible value and feasible count over a lead range."""
    if JIT_ENABLED:
        return _grid_max_jit(value, bw_cost, comp_cost, bw_cap, comp_cap, lead_lo, lead_hi)
    best, _, _, n_feasible = grid_search_np(value, bw_cost, comp_cost, bw_cap, comp_cap,
                                            lead_lo, lead_hi)
    return best, n_feasible


def grid_ties(value, bw_cost, comp_cost, bw_cap, comp_cap, lead_lo, lead_hi, best, tol=TIE_TOL):
    """Pass 2: first grid point within ``tol`` of ``best`` and the tie count."""
    if JIT_ENABLED:
        return _grid_ties_jit(value, bw_cost, comp_cost, bw_cap, comp_cap, lead_lo, lead_hi,
                              best, tol)
    first = np.full(2 * value.shape[0], -1, dtype=np.int64)
    ties = 0
    for lead in range(lead_lo, lead_hi):
        v, bw, cp = _grid_block_np(value, bw_cost, comp_cost, lead)
        mask = (bw <= bw_cap) & (cp <= comp_cap) & (v >= best - tol)
        k = int(mask.sum())
        if k and ties == 0:
            rest = _unravel(int(np.flatnonzero(mask.ravel())[0]), *value.shape)
            first = np.concatenate([[lead], rest]).astype(np.int64)
        ties += k
    return first, ties


def grid_search(value, bw_cost, comp_cost, bw_cap, comp_cap, tol=TIE_TOL):
    if JIT_ENABLED:
        return grid_search_jit(value, bw_cost, comp_cost, bw_cap, comp_cap, tol=tol)
    return grid_search_np(value, bw_cost, comp_cost, bw_cap, comp_cap, tol=tol)


# --------------------------------------------------------------------------
# two-resource knapsack over integer units
# --------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _knapsack_jit(value, bw_units, comp_units, bw_cap, comp_cap):
    n, R, T = value.shape
    G = np.zeros((bw_cap + 1, comp_cap + 1))
    choice = np.full((n, bw_cap + 1, comp_cap + 1), -1, dtype=np.int64)
    for i in range(n):
        H = np.full((bw_cap + 1, comp_cap + 1), -np.inf)
        for a in range(R):
            ua = bw_units[a]
            for b in range(T):
                ub = comp_units[b]
                v = value[i, a, b]
                for x in range(ua, bw_cap + 1):
                    for y in range(ub, comp_cap + 1):
                        cand = G[x - ua, y - ub] + v
                        if cand > H[x, y]:
                            H[x, y] = cand
                            choice[i, x, y] = a * T + b
        G = H
    return G[bw_cap, comp_cap], choice


def knapsack_np(value, bw_units, comp_units, bw_cap, comp_cap):
    n, R, T = value.shape
    G = np.zeros((bw_cap + 1, comp_cap + 1))
    choice = np.full((n, bw_cap + 1, comp_cap + 1), -1, dtype=np.int64)
    for i in range(n):
        H = np.full_like(G, -np.inf)
        for a in range(R):
            ua = int(bw_units[a])
            for b in range(T):
                ub = int(comp_units[b])
                if ua > bw_cap or ub > comp_cap:
                    continue
                cand = G[: bw_cap + 1 - ua, : comp_cap + 1 - ub] + value[i, a, b]
                view = H[ua:, ub:]
                better = cand > view
                view[better] = cand[better]
                choice[i, ua:, ub:][better] = a * T + b
        G = H
    return G[bw_cap, comp_cap], choice


def knapsack_jit(value, bw_units, comp_units, bw_cap, comp_cap):
    return _knapsack_jit(value, bw_units, comp_units, bw_cap, comp_cap)


def knapsack(value, bw_units, comp_units, bw_cap, comp_cap):
    """Best total value with at most ``bw_cap``/``comp_cap`` units used.

    Returns ``(best, levels)`` where ``levels`` is an ``(n, 2)`` array of
    (ratio level, step index) per user, or ``(-inf, None)`` when infeasible.
    """
    value = np.ascontiguousarray(value, dtype=np.float64)
    bw_units = np.ascontiguousarray(bw_units, dtype=np.int64)
    comp_units = np.ascontiguousarray(comp_units, dtype=np.int64)
    fn = knapsack_jit if JIT_ENABLED else knapsack_np
    best, choice = fn(value, bw_units, comp_units, int(bw_cap), int(comp_cap))
    if not np.isfinite(best):
        return best, None
    return best, _walk_back(choice, bw_units, comp_units, bw_cap, comp_cap, value.shape[2])


def _walk_back(choice, bw_units, comp_units, bw_cap, comp_cap, T):
    n = choice.shape[0]
    levels = np.zeros((n, 2), dtype=np.int64)
    x, y = int(bw_cap), int(comp_cap)
    for i in range(n - 1, -1, -1):
        c = int(choice[i, x, y])
        a, b = divmod(c, T)
        levels[i] = (a, b)
        x -= int(bw_units[a])
        y -= int(comp_units[b])
    return levels

"""Independent matching oracles shared by the unit and acceptance tests."""

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment


def brute_greedy(ct, pool, ct_l, pool_l, order, caliper, cov):
    """Independent greedy: explicit loops and a linear solve for each distance."""
    pool_ids = sorted(pool.index)
    taken, pairs = set(), {}
    ct_ids = sorted(ct.index)
    for i in order:
        c = ct_ids[i]
        best, best_d = None, np.inf
        for p in pool_ids:
            if p in taken or abs(ct_l[c] - pool_l[p]) > caliper:
                continue
            d = pool.loc[p].to_numpy() - ct.loc[c].to_numpy()
            dist = float(np.sqrt(d @ np.linalg.solve(cov, d)))
            if dist < best_d - 1e-12:
                best, best_d = p, dist
        if best is not None:
            taken.add(best)
            pairs[c] = (best, best_d)
    return pairs


def random_instance(seed, max_ct=8, max_pool=15, dim=3):
    rng = np.random.default_rng(seed)
    n_ct = int(rng.integers(1, max_ct + 1))
    n_pool = int(rng.integers(1, max_pool + 1))
    ct = pd.DataFrame(rng.standard_normal((n_ct, dim)), index=[f"C{i:02d}" for i in range(n_ct)])
    pool = pd.DataFrame(rng.standard_normal((n_pool, dim)) * 1.3,
                        index=[f"P{i:02d}" for i in range(n_pool)])
    ct_l = pd.Series(rng.normal(0, 1, n_ct), index=ct.index)
    pool_l = pd.Series(rng.normal(0, 1, n_pool), index=pool.index)
    caliper = float(rng.uniform(0.3, 2.0))
    return ct, pool, ct_l, pool_l, caliper


def optimal_cost(ct_ids, ct, pool, ct_l, pool_l, caliper, cov):
    """Minimum total distance over one-to-one assignments of ``ct_ids`` inside the caliper."""
    cost = np.full((len(ct_ids), len(pool)), 1e9)
    for a, c in enumerate(ct_ids):
        for b, p in enumerate(pool.index):
            if abs(ct_l[c] - pool_l[p]) <= caliper:
                d = ct.loc[c].to_numpy() - pool.loc[p].to_numpy()
                cost[a, b] = np.sqrt(d @ np.linalg.solve(cov, d))
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())

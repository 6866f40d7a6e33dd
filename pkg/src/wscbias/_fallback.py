"""Pure numpy versions of the compiled kernels."""

import numpy as np


def greedy_match(ct_w, pool_w, ct_logit, pool_logit, order, caliper):
    """Greedy 1:1 matching without replacement; see ``_kernels.greedy_match``."""
    ct_w = np.asarray(ct_w, dtype=float)
    pool_w = np.asarray(pool_w, dtype=float)
    ct_logit = np.asarray(ct_logit, dtype=float)
    pool_logit = np.asarray(pool_logit, dtype=float)
    n_ct = ct_w.shape[0]
    match = np.full(n_ct, -1, dtype=np.int64)
    dist = np.full(n_ct, np.nan)
    cand = np.zeros(n_ct, dtype=np.int64)
    free = np.ones(pool_w.shape[0], dtype=bool)
    for i in np.asarray(order, dtype=np.int64):
        idx = np.flatnonzero(free & (np.abs(ct_logit[i] - pool_logit) <= caliper))
        cand[i] = idx.size
        if idx.size == 0:
            continue
        diff = pool_w[idx] - ct_w[i]
        # accumulate coordinate by coordinate, as the compiled loop does
        s = np.zeros(idx.size)
        for k in range(diff.shape[1]):
            s += diff[:, k] * diff[:, k]
        j = idx[np.argmin(s)]
        free[j] = False
        match[i] = j
        dist[i] = np.sqrt(s.min())
    return match, dist, cand

"""Common-support trimming and greedy Mahalanobis matching within a caliper."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy import linalg

from . import kernels
from .errors import ArgumentError, MatchingError, MatrixError, NoOverlapError

RIDGE = 1e-8
CALIPER_SD_MULTIPLIER = 0.2


class Pair(NamedTuple):
    ct_id: object
    co_id: object
    distance: float
    logit_gap: float


@dataclass
class MatchedSample:
    """Matched CT/CO pairs with the provenance needed to rerun the match.

    ``pool_ids`` is the common-support-trimmed pool the matches were drawn
    from; ``candidates`` maps every CT school to the number of pool schools
    still available and inside its caliper when its turn came.
    """

    pairs: list[Pair]
    unmatched_ct: list
    caliper_width: float
    order_seed: int
    pool_ids: list = field(default_factory=list)
    n_trimmed: int = 0
    candidates: dict = field(default_factory=dict)

    @property
    def ct_ids(self) -> list:
        return [p.ct_id for p in self.pairs]

    @property
    def co_ids(self) -> list:
        return [p.co_id for p in self.pairs]

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"ct_school_id": p.ct_id, "co_school_id": p.co_id, "distance": p.distance,
             "logit_gap": p.logit_gap, "matched": True,
             "candidates": self.candidates.get(p.ct_id, 0)}
            for p in self.pairs
        ]
        rows += [
            {"ct_school_id": s, "co_school_id": "", "distance": np.nan, "logit_gap": np.nan,
             "matched": False, "candidates": self.candidates.get(s, 0)}
            for s in self.unmatched_ct
        ]
        return pd.DataFrame(rows, columns=["ct_school_id", "co_school_id", "distance",
                                           "logit_gap", "matched", "candidates"])

    def header(self) -> dict:
        return {
            "caliper_width": self.caliper_width,
            "order_seed": self.order_seed,
            "n_pool": len(self.pool_ids),
            "n_trimmed": self.n_trimmed,
        }

    def to_csv(self, path):
        """CSV of pair and unmatched rows after a one-line ``# {json}`` header."""
        with open(path, "w", newline="") as fh:
            fh.write("# " + json.dumps(self.header(), sort_keys=True) + "\n")
            self.to_frame().to_csv(fh, index=False, float_format="%.17g")


def read_matched_csv(path):
    """Header dict and pair/unmatched frame written by ``MatchedSample.to_csv``."""
    with open(path) as fh:
        header = json.loads(fh.readline()[2:])
        frame = pd.read_csv(fh, dtype={"ct_school_id": str, "co_school_id": str}, float_precision="round_trip",
                            keep_default_na=False, na_values={"distance": [""], "logit_gap": [""]})
    return header, frame


def mahalanobis_distance(x1, x2, cov_inverse) -> float:
    """sqrt((x1 - x2)' S (x1 - x2)) for a symmetric positive definite S."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    S = np.asarray(cov_inverse, dtype=float)
    if x1.shape != x2.shape or S.shape != (x1.size, x1.size):
        raise ArgumentError("dimension mismatch")
    d = x1 - x2
    return float(np.sqrt(max(d @ S @ d, 0.0)))


def pool_covariance(pool_features, ridge: float = RIDGE) -> np.ndarray:
    """Sample covariance of the pool rows plus ``ridge`` on the diagonal.

    Raises MatrixError if the result is not positive definite.
    """
    X = np.asarray(pool_features, dtype=float)
    if X.shape[0] < 2:
        raise MatrixError("need at least two pool rows for a covariance", float("nan"))
    cov = np.atleast_2d(np.cov(X, rowvar=False, ddof=1)) + ridge * np.eye(X.shape[1])
    smallest = float(np.linalg.eigvalsh(cov)[0])
    if not smallest > 0:
        raise MatrixError("covariance not positive definite after ridge", smallest)
    return cov


def whitening(cov) -> np.ndarray:
    """Matrix W with W' W = cov^-1, so ||W d|| is the Mahalanobis norm of d."""
    L = np.linalg.cholesky(cov)
    return linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True)


def trim_common_support(pool_logit: pd.Series, ct_logit) -> tuple[pd.Series, int]:
    """Keep pool schools whose logit lies within [min, max] of the CT logits."""
    ct = np.asarray(ct_logit, dtype=float)
    if len(pool_logit) == 0 or ct.size == 0:
        raise ArgumentError("pool and CT set must be non-empty")
    lo, hi = ct.min(), ct.max()
    keep = (pool_logit >= lo) & (pool_logit <= hi)
    if not keep.any():
        raise NoOverlapError("no pool school inside the CT logit range")
    return pool_logit[keep], int((~keep).sum())


def default_caliper(pool_logit) -> float:
    return CALIPER_SD_MULTIPLIER * float(np.std(np.asarray(pool_logit, dtype=float), ddof=1))


def processing_order(n: int, order_seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(order_seed)))
    return rng.permutation(n).astype(np.int64)


def match_one_to_one(ct: pd.DataFrame, pool: pd.DataFrame, ct_logit, pool_logit,
                     caliper_width: float | None = None, order_seed: int = 0,
                     strict: bool = True, cov=None, n_trimmed: int = 0) -> MatchedSample:
    """Greedy 1:1 Mahalanobis matching without replacement inside a caliper.

    CT schools are visited in a seeded random permutation of their sorted
    ids. Each takes the closest still-available pool school whose logit
    differs from its own by at most ``caliper_width``; exact distance ties
    go to the smaller school id.

    Parameters
    ----------
    ct, pool : DataFrame
        Matching covariates indexed by school id. ``pool`` should already be
        trimmed to common support.
    ct_logit, pool_logit : Series indexed like ``ct`` and ``pool``
    caliper_width : float, optional
        Defaults to 0.2 SD of the pool logits.
    order_seed : int
    strict : bool
        Raise MatchingError when a CT school finds no match.
    cov : array, optional
        Distance covariance; defaults to ``pool_covariance(pool)``.
    """
    if len(ct) == 0 or len(pool) == 0:
        raise ArgumentError("CT set and pool must be non-empty")
    ct = ct.sort_index()
    pool = pool.sort_index()
    ct_l = pd.Series(ct_logit).reindex(ct.index).to_numpy(dtype=float)
    pool_l = pd.Series(pool_logit).reindex(pool.index).to_numpy(dtype=float)
    if np.isnan(ct_l).any() or np.isnan(pool_l).any():
        raise ArgumentError("missing logit scores")
    return match_arrays(list(ct.index), ct.to_numpy(dtype=float), ct_l,
                        list(pool.index), pool.to_numpy(dtype=float), pool_l,
                        caliper_width, order_seed, strict, cov, n_trimmed)


def match_arrays(ct_ids, ct_x, ct_logit, pool_ids, pool_x, pool_logit,
                 caliper_width=None, order_seed: int = 0, strict: bool = True, cov=None,
                 n_trimmed: int = 0) -> MatchedSample:
    """Array form of ``match_one_to_one``; both id lists must be sorted."""
    if len(ct_ids) == 0 or len(pool_ids) == 0:
        raise ArgumentError("CT set and pool must be non-empty")
    if set(ct_ids) & set(pool_ids):
        raise ArgumentError("CT schools may not also be in the pool")
    ct_l = np.asarray(ct_logit, dtype=float)
    pool_l = np.asarray(pool_logit, dtype=float)
    if caliper_width is None:
        if len(pool_ids) < 2:
            raise NoOverlapError("common support holds fewer than two pool schools")
        caliper_width = default_caliper(pool_l)
    if not caliper_width > 0:
        raise ArgumentError("caliper_width must be positive")
    if cov is None:
        cov = pool_covariance(pool_x)
    W = whitening(cov)
    ct_w = np.ascontiguousarray(np.asarray(ct_x, dtype=float) @ W.T)
    pool_w = np.ascontiguousarray(np.asarray(pool_x, dtype=float) @ W.T)
    order = processing_order(len(ct_ids), order_seed)
    match, dist, cand = kernels.greedy_match(ct_w, pool_w, ct_l, pool_l, order,
                                             float(caliper_width))
    pairs, unmatched = [], []
    for i in order:
        sid = ct_ids[i]
        if match[i] >= 0:
            j = match[i]
            pairs.append(Pair(sid, pool_ids[j], float(dist[i]), float(abs(ct_l[i] - pool_l[j]))))
        else:
            unmatched.append(sid)
    candidates = {ct_ids[i]: int(cand[i]) for i in range(len(ct_ids))}
    if strict and unmatched:
        first = unmatched[0]
        raise MatchingError(first, candidates[first])
    return MatchedSample(pairs=pairs, unmatched_ct=unmatched, caliper_width=float(caliper_width),
                         order_seed=int(order_seed), pool_ids=list(pool_ids),
                         n_trimmed=n_trimmed, candidates=candidates)

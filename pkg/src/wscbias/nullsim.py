"""Placebo reference distributions for naive and matched bias.

Each replicate draws, for every intervention, a placebo set of n_w schools
from the comparison pool and re-estimates bias as if those schools were the
trial's controls. Replicate r of intervention w always uses the random
stream keyed by (master_seed, r, w), so any replicate can be rerun alone
and results do not depend on how replicates are spread over workers.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from .analysis import AnalysisOptions, analyze_intervention
from .biasest import StudentTable
from .errors import (
    ArgumentError,
    ConvergenceError,
    DegenerateLabelsError,
    MatchingError,
    MatrixError,
    NoOverlapError,
    RankDeficientError,
)

log = logging.getLogger(__name__)

MODES = ("naive", "match")
THREADS_ENV = "WSCBIAS_THREADS"
REPLICATE_FAILURES = (
    NoOverlapError,
    MatchingError,
    ConvergenceError,
    RankDeficientError,
    DegenerateLabelsError,
    MatrixError,
)


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def replicate_stream(master_seed: int, replicate: int, intervention: int) -> np.random.Generator:
    seq = np.random.SeedSequence(master_seed, spawn_key=(replicate, intervention))
    return np.random.Generator(np.random.Philox(seq))


@dataclass
class NullContext:
    """Everything a replicate needs, shared read-only across workers.

    ``pool_ids`` are the potential comparison schools (S = 0), sorted.
    ``design`` is only needed in match mode.
    """

    table: StudentTable
    pool_ids: list
    sds: dict
    design: object = None
    options: AnalysisOptions = AnalysisOptions()

    def __post_init__(self):
        self.pool_ids = sorted(self.pool_ids)
        self.pool_pos = np.sort(self.table.positions(self.pool_ids))
        self.pool_mean = self.table.sums[self.pool_pos].sum(axis=0) / self.table.counts[self.pool_pos].sum()
        self.sd_vec = np.array([self.sds[k] for k in self.table.outcomes])


@dataclass
class NullReference:
    """R x C matrix of placebo bias estimates, C = interventions x outcomes.

    Rows of failed replicates are NaN and listed in ``failures``; the
    summaries below use the remaining rows only.
    """

    mode: str
    draws: np.ndarray
    cells: list
    master_seed: int
    failures: dict = field(default_factory=dict)

    @property
    def replicates(self) -> int:
        return self.draws.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.draws).any(axis=1)

    @property
    def n_failed(self) -> int:
        return int((~self.valid).sum())

    @property
    def mu_null(self) -> np.ndarray:
        return self.draws[self.valid].mean(axis=1)

    @property
    def sigma_null(self) -> np.ndarray:
        return self.draws[self.valid].std(axis=1, ddof=1)

    @property
    def per_cell_variance(self) -> pd.Series:
        v = self.draws[self.valid].var(axis=0, ddof=1)
        return pd.Series(v, index=pd.MultiIndex.from_tuples(self.cells, names=["intervention", "outcome"]))

    def draws_frame(self) -> pd.DataFrame:
        cols = [f"{w}:{k}" for w, k in self.cells]
        frame = pd.DataFrame(self.draws, columns=cols)
        frame.insert(0, "status", ["ok" if v else "failed" for v in self.valid])
        frame.insert(0, "replicate", np.arange(self.replicates))
        return frame

    def summary(self) -> dict:
        mu, sd = self.mu_null, self.sigma_null
        return {
            "mode": self.mode,
            "replicates": self.replicates,
            "master_seed": self.master_seed,
            "n_failed": self.n_failed,
            "failures": {str(k): v for k, v in sorted(self.failures.items())},
            "mu_null_mean": float(mu.mean()) if mu.size else None,
            "mu_null_sd": float(mu.std(ddof=1)) if mu.size > 1 else None,
            "sigma_null_mean": float(sd.mean()) if sd.size else None,
            "sigma_null_sd": float(sd.std(ddof=1)) if sd.size > 1 else None,
            "per_cell_variance": {f"{w}:{k}": float(v) for (w, k), v in self.per_cell_variance.items()},
        }

    def save(self, csv_path, json_path):
        self.draws_frame().to_csv(csv_path, index=False, float_format="%.17g")
        with open(json_path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, csv_path, json_path) -> "NullReference":
        frame = pd.read_csv(csv_path, float_precision="round_trip")
        with open(json_path) as fh:
            meta = json.load(fh)
        cols = [c for c in frame.columns if c not in ("replicate", "status")]
        cells = [tuple(c.split(":", 1)) for c in cols]
        failures = {int(k): v for k, v in meta.get("failures", {}).items()}
        return cls(meta["mode"], frame[cols].to_numpy(dtype=float), cells, int(meta["master_seed"]),
                   failures)


def _placebo(ctx: NullContext, n_w: int, rng) -> np.ndarray:
    return np.sort(rng.choice(len(ctx.pool_ids), size=n_w, replace=False))


def _naive_row(ctx: NullContext, sizes, master_seed, r) -> np.ndarray:
    out = []
    for w, n_w in enumerate(sizes):
        idx = _placebo(ctx, n_w, replicate_stream(master_seed, r, w))
        pos = ctx.pool_pos[idx]
        mean = ctx.table.sums[pos].sum(axis=0) / ctx.table.counts[pos].sum()
        out.append((mean - ctx.pool_mean) / ctx.sd_vec)
    return np.concatenate(out)


def _match_row(ctx: NullContext, sizes, master_seed, r) -> np.ndarray:
    out = []
    pool = np.array(ctx.pool_ids, dtype=object)
    for w, n_w in enumerate(sizes):
        rng = replicate_stream(master_seed, r, w)
        idx = _placebo(ctx, n_w, rng)
        order_seed = int(rng.integers(0, 2**63))
        mask = np.ones(len(pool), dtype=bool)
        mask[idx] = False
        res = analyze_intervention(ctx.design, ctx.table, list(pool[idx]), list(pool[mask]),
                                   ctx.sds, (), ctx.options, order_seed)
        out.append([res.mlm[k].beta_match for k in ctx.table.outcomes])
    return np.concatenate(out)


def _run_replicates(ctx, sizes, mode, master_seed, replicates):
    fn = _naive_row if mode == "naive" else _match_row
    rows, failures = {}, {}
    for r in replicates:
        try:
            rows[r] = fn(ctx, sizes, master_seed, r)
        except REPLICATE_FAILURES as exc:
            failures[r] = f"{type(exc).__name__}: {exc}"
    return rows, failures


_WORKER_CTX = None


def _init_worker(ctx):
    global _WORKER_CTX
    _WORKER_CTX = ctx
    # one BLAS thread per worker process; the processes are the parallelism
    threadpool_limits(1)


def _worker(args):
    sizes, mode, master_seed, replicates = args
    return _run_replicates(_WORKER_CTX, sizes, mode, master_seed, replicates)


def run_null_reference(ctx: NullContext, trial_sizes: dict, mode: str, replicates: int,
                       master_seed: int, threads: int | None = None) -> NullReference:
    """Placebo reference distribution of bias estimates.

    Parameters
    ----------
    ctx : NullContext
    trial_sizes : dict intervention id -> n_w (insertion order fixes columns)
    mode : "naive" or "match"
    replicates : R >= 1
    master_seed : int
    threads : worker processes (default from WSCBIAS_THREADS, else 1)
    """
    if mode not in MODES:
        raise ArgumentError(f"mode must be one of {MODES}")
    if replicates < 1:
        raise ArgumentError("need at least one replicate")
    if mode == "match" and ctx.design is None:
        raise ArgumentError("match mode needs a design")
    ids = list(trial_sizes)
    sizes = [int(trial_sizes[w]) for w in ids]
    limit = len(ctx.pool_ids) - (1 if mode == "match" else 0)
    for w, n_w in zip(ids, sizes):
        if n_w < 1 or n_w > limit:
            raise ArgumentError(f"intervention {w}: n_w={n_w} does not fit a pool of {len(ctx.pool_ids)}")
    threads = default_threads() if threads is None else max(1, int(threads))
    k = len(ctx.table.outcomes)
    cells = [(w, o) for w in ids for o in ctx.table.outcomes]
    draws = np.full((replicates, len(sizes) * k), np.nan)
    failures = {}
    if threads == 1 or replicates == 1:
        rows, failures = _run_replicates(ctx, sizes, mode, master_seed, range(replicates))
    else:
        chunks = [list(range(replicates))[i::threads * 4] for i in range(threads * 4)]
        chunks = [c for c in chunks if c]
        rows = {}
        with ProcessPoolExecutor(threads, initializer=_init_worker, initargs=(ctx,)) as ex:
            for part_rows, part_fail in ex.map(_worker, [(sizes, mode, master_seed, c) for c in chunks]):
                rows.update(part_rows)
                failures.update(part_fail)
    for r, row in rows.items():
        draws[r] = row
    if failures:
        log.warning("%d of %d %s replicates failed and are excluded", len(failures), replicates, mode)
    return NullReference(mode, draws, cells, int(master_seed), dict(sorted(failures.items())))


def summarize_reference(values) -> tuple[float, float]:
    """Signed mean and sample SD (n - 1 denominator) of a set of cell values."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size < 2:
        raise ArgumentError("spread needs at least two cells")
    return float(v.mean()), float(v.std(ddof=1))


def p_value(observed: float, reference) -> float:
    """Two-sided placebo p-value with the add-one correction.

    p = (1 + #{r : |ref_r - c| >= |observed - c|}) / (R + 1), where c is the
    mean of the reference draws.
    """
    ref = np.asarray(reference, dtype=float).ravel()
    ref = ref[~np.isnan(ref)]
    if ref.size < 1:
        raise ArgumentError("empty reference distribution")
    center = ref.mean()
    extreme = np.abs(ref - center) >= abs(observed - center)
    return float((1 + extreme.sum()) / (ref.size + 1))

"""Naive and matched selection-bias estimates in effect-size units."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .errors import ArgumentError
from .reml import RandomInterceptModel
from .synthpop import OUTCOMES, STUDENT_COVARIATES

ESTIMATE_COLUMNS = ["intervention", "outcome", "kind", "value", "se", "n_schools", "n_students"]


@dataclass
class BiasEstimate:
    intervention_id: str
    outcome: str
    kind: str  # "naive" or "match"
    value: float
    se: float | None
    n_schools: int
    n_students: int

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ArgumentError(f"non-finite bias estimate for {self.intervention_id}/{self.outcome}")
        if self.se is not None and not self.se >= 0:
            raise ArgumentError("standard error must be non-negative")

    @property
    def key(self):
        return (self.intervention_id, self.outcome)


@dataclass
class MlmFit:
    """Random-intercept model of standardized outcomes on S and covariates."""

    beta_match: float
    se_beta: float
    sigma_alpha2: float
    sigma2: float
    gamma: pd.Series
    converged: bool
    ratio: float = 0.0
    loglik: float = float("nan")
    n_schools: int = 0
    n_students: int = 0
    dropped_columns: list = field(default_factory=list)

    def to_estimate(self, intervention_id: str, outcome: str) -> BiasEstimate:
        return BiasEstimate(intervention_id, outcome, "match", self.beta_match, self.se_beta,
                            self.n_schools, self.n_students)


class StudentTable:
    """Students sorted by (school_id, student_id) with contiguous school blocks.

    Missing student covariates are filled with the mean of the observed
    values in the same school; a school with none observed keeps NaN, which
    ``design_rows`` replaces with the mean over the analysis sample.

    Parameters
    ----------
    students : DataFrame with school_id, student_id, covariates and outcomes
    covariates : student covariate names to carry
    outcomes : outcome names; the column ``y_<name>`` is used when present
    """

    def __init__(self, students: pd.DataFrame, covariates=STUDENT_COVARIATES, outcomes=OUTCOMES):
        if len(students) == 0:
            raise ArgumentError("no students")
        keys = ["school_id"] + (["student_id"] if "student_id" in students.columns else [])
        frame = students.sort_values(keys, kind="mergesort").reset_index(drop=True)
        self.covariates = [c for c in covariates if c in frame.columns]
        self.outcomes = list(outcomes)
        sid = frame["school_id"].to_numpy()
        starts = np.flatnonzero(np.r_[True, sid[1:] != sid[:-1]])
        stops = np.r_[starts[1:], len(sid)]
        self.school_ids = sid[starts]
        self.block = {s: (a, b) for s, a, b in zip(self.school_ids, starts, stops)}
        self.school_of_row = sid
        cov = frame[self.covariates].to_numpy(dtype=float) if self.covariates else np.empty((len(frame), 0))
        if np.isnan(cov).any():
            school_means = frame.groupby("school_id", sort=True)[self.covariates].transform("mean")
            cov = np.where(np.isnan(cov), school_means.to_numpy(dtype=float), cov)
        self.cov = cov
        ycols = [f"y_{k}" if f"y_{k}" in frame.columns else k for k in self.outcomes]
        self.y = frame[ycols].to_numpy(dtype=float)
        counts = (stops - starts).astype(float)
        sums = np.add.reduceat(self.y, starts, axis=0)
        self.school_index = pd.Index(self.school_ids)
        self.counts = counts
        self.sums = sums

    def rows(self, school_ids) -> np.ndarray:
        parts = []
        for s in school_ids:
            try:
                a, b = self.block[s]
            except KeyError:
                raise ArgumentError(f"school {s} has no students") from None
            parts.append(np.arange(a, b))
        return np.concatenate(parts) if parts else np.empty(0, dtype=int)

    def positions(self, school_ids) -> np.ndarray:
        pos = self.school_index.get_indexer(list(school_ids))
        if (pos < 0).any():
            raise ArgumentError("school without students requested")
        return pos

    def group_mean(self, school_ids) -> np.ndarray:
        """Student-level mean of each outcome over the listed schools."""
        pos = np.sort(self.positions(school_ids))
        return self.sums[pos].sum(axis=0) / self.counts[pos].sum()

    def n_students(self, school_ids) -> int:
        return int(self.counts[self.positions(school_ids)].sum())


def outcome_sds(students: pd.DataFrame, outcomes=OUTCOMES) -> dict:
    """Population SD (ddof=1) of each outcome over the whole snapshot."""
    cols = {k: f"y_{k}" if f"y_{k}" in students.columns else k for k in outcomes}
    return {k: float(students[c].std(ddof=1)) for k, c in cols.items()}


def naive_bias(table: StudentTable, ct_ids, pool_ids, outcome: str, sd: float,
               intervention_id: str = "") -> BiasEstimate:
    """Student-level mean outcome of CT minus that of the pool, over ``sd``."""
    ct_ids, pool_ids = sorted(ct_ids), sorted(pool_ids)
    if not ct_ids or not pool_ids:
        raise ArgumentError("CT and pool must be non-empty")
    if not sd > 0:
        raise ArgumentError("outcome SD must be positive")
    k = table.outcomes.index(outcome)
    diff = table.group_mean(ct_ids)[k] - table.group_mean(pool_ids)[k]
    return BiasEstimate(intervention_id, outcome, "naive", float(diff / sd), None,
                        len(ct_ids), table.n_students(ct_ids))


@dataclass
class MlmDesign:
    """Student-level fixed-effects design for one matched sample."""

    X: np.ndarray
    names: list
    groups: np.ndarray
    rows: np.ndarray
    n_schools: int
    dropped: list


def mlm_design(table: StudentTable, ct_ids, co_ids, school_features: pd.DataFrame | None = None,
               student_covariates=None) -> MlmDesign:
    """Intercept, S, student covariates and school covariates for CT and CO.

    Constant and collinear columns are dropped, later columns first; the
    intercept and S are always kept.
    """
    from .propensity import _independent_columns

    ct_ids, co_ids = sorted(ct_ids), sorted(co_ids)
    if not ct_ids or not co_ids:
        raise ArgumentError("matched sample needs CT and CO schools")
    if set(ct_ids) & set(co_ids):
        raise ArgumentError("a school is both CT and CO")
    schools = ct_ids + co_ids
    rows = table.rows(schools)
    sid = table.school_of_row[rows]
    s = np.isin(sid, ct_ids).astype(float)
    cols = [np.ones(len(rows)), s]
    names = ["(intercept)", "S"]
    scov = table.covariates if student_covariates is None else list(student_covariates)
    for c in scov:
        v = table.cov[rows, table.covariates.index(c)]
        if np.isnan(v).any():
            v = np.where(np.isnan(v), np.nanmean(v) if np.isfinite(v).any() else 0.0, v)
        cols.append(v)
        names.append(c)
    if school_features is not None and school_features.shape[1]:
        pos = school_features.index.get_indexer(sid)
        if (pos < 0).any():
            raise ArgumentError("school features missing for a matched school")
        F = school_features.to_numpy(dtype=float)[pos]
        cols.extend(F.T)
        names.extend(school_features.columns)
    X = np.column_stack(cols)
    centered = X - X.mean(axis=0)
    varying = np.ones(X.shape[1], dtype=bool)
    varying[2:] = np.abs(centered[:, 2:]).max(axis=0) > 0
    idx = np.flatnonzero(varying)
    keep = idx[_independent_columns(X[:, idx])]
    if not (keep[:2] == [0, 1]).all():
        raise ArgumentError("selection indicator is collinear with the intercept")
    dropped = [names[i] for i in range(len(names)) if i not in set(keep)]
    return MlmDesign(X=X[:, keep], names=[names[i] for i in keep], groups=sid, rows=rows,
                     n_schools=len(schools), dropped=dropped)


def fit_mlm_outcomes(table: StudentTable, design: MlmDesign, sds: dict, outcomes=None,
                     ratio=None) -> dict:
    """REML fits for several outcomes sharing one design."""
    outcomes = list(outcomes or table.outcomes)
    model = RandomInterceptModel(design.X, design.groups, design.names)
    out = {}
    for k in outcomes:
        y = table.y[design.rows, table.outcomes.index(k)] / sds[k]
        fit = model.fit(y, ratio=ratio)
        se = fit.se_beta
        out[k] = MlmFit(
            beta_match=float(fit.beta[1]),
            se_beta=float(se[1]),
            sigma_alpha2=float(fit.sigma_a2),
            sigma2=float(fit.sigma2),
            gamma=pd.Series(fit.beta[2:], index=design.names[2:], dtype=float),
            converged=fit.converged,
            ratio=float(fit.ratio),
            loglik=float(fit.loglik),
            n_schools=design.n_schools,
            n_students=len(design.rows),
            dropped_columns=list(design.dropped),
        )
    return out


def matched_bias_mlm(matched, table: StudentTable, school_features: pd.DataFrame | None,
                     outcome: str, sd: float, ratio=None) -> MlmFit:
    """Multilevel estimate of selection bias from a matched sample.

    Fits y_ij / sd = a_j + g'x_ij + b S_j + e_ij by REML over the students of
    the matched CT and CO schools, where x_ij holds the student covariates
    and the school matching covariates. ``ratio`` fixes s_a^2 / s^2 instead
    of estimating it (0 gives ordinary least squares).
    """
    if not matched.pairs:
        raise ArgumentError("matched sample is empty")
    design = mlm_design(table, matched.ct_ids, matched.co_ids, school_features)
    return fit_mlm_outcomes(table, design, {outcome: sd}, [outcome], ratio)[outcome]


def decompose_bias(naive: BiasEstimate, match: BiasEstimate) -> tuple[float, float]:
    """(delta_x_hat, delta_u_hat) = (naive - match, match)."""
    if naive.key != match.key:
        raise ArgumentError(f"estimates refer to different cells: {naive.key} vs {match.key}")
    return naive.value - match.value, match.value


def estimates_frame(estimates) -> pd.DataFrame:
    rows = []
    for e in estimates:
        d = asdict(e)
        rows.append({"intervention": d["intervention_id"], "outcome": d["outcome"],
                     "kind": d["kind"], "value": d["value"], "se": d["se"],
                     "n_schools": d["n_schools"], "n_students": d["n_students"]})
    return pd.DataFrame(rows, columns=ESTIMATE_COLUMNS)


def write_estimates_csv(estimates, path):
    estimates_frame(estimates).to_csv(path, index=False, float_format="%.17g")


def read_estimates_csv(path) -> list[BiasEstimate]:
    frame = pd.read_csv(path, dtype={"intervention": str}, float_precision="round_trip")
    out = []
    for r in frame.itertuples(index=False):
        se = None if pd.isna(r.se) else float(r.se)
        out.append(BiasEstimate(r.intervention, r.outcome, r.kind, float(r.value), se,
                                int(r.n_schools), int(r.n_students)))
    return out

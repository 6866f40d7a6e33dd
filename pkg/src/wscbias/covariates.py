"""School-level matching covariates.

Turns a population snapshot into the standardized school design matrix:
school means of student covariates, log-transformed budgets, growth-curve
summaries of pre-period achievement, simple imputation and scaling.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ArgumentError
from .synthpop import (
    BUDGET_COVARIATES,
    SCHOOL_BINARY,
    SCHOOL_COVARIATES,
    STUDENT_BINARY,
    STUDENT_COVARIATES,
    PopulationSnapshot,
)

log = logging.getLogger(__name__)

GROWTH_WINDOW = 4
GROWTH_COLUMNS = ("academic_level", "academic_growth", "grade_level_growth")


def aggregate_to_school(students: pd.DataFrame, school_ids=None, covariates=None):
    """Per-school arithmetic means of student covariates.

    Missing student values are skipped. Rows are summed in (school_id,
    student_id) order so the result does not depend on input row order.

    Returns
    -------
    means : DataFrame indexed by school_id
    warnings : list of str
        One record per requested school with no students in the cohort.
    """
    if len(students) == 0:
        raise ArgumentError("student list is empty")
    covariates = list(covariates or [c for c in STUDENT_COVARIATES if c in students.columns])
    order = ["school_id"] + (["student_id"] if "student_id" in students.columns else [])
    frame = students.sort_values(order, kind="mergesort")
    means = frame.groupby("school_id", sort=True)[covariates].mean()
    warnings = []
    if school_ids is not None:
        wanted = pd.Index(school_ids)
        absent = wanted.difference(means.index)
        for sid in absent:
            warnings.append(f"school {sid}: no students in cohort, excluded")
        means = means.loc[wanted.intersection(means.index).sort_values()]
    return means, warnings


@dataclass
class GrowthFit:
    """Growth-curve covariates for every school with history.

    ``table`` has columns ``level``, ``growth``, ``n_years`` and ``method``
    (``model``, ``two_year``, ``one_year``). ``gamma`` is the population mean
    of the quadratic coefficients (intercept at t*-1), ``tau`` their
    between-school covariance and ``sigma2`` the pooled residual variance.
    """

    table: pd.DataFrame
    dropped: dict[str, str]
    gamma: np.ndarray
    tau: np.ndarray
    sigma2: float
    raw_coefficients: pd.DataFrame = field(default_factory=pd.DataFrame)


def _quadratic_design(rel_years):
    u = np.asarray(rel_years, dtype=float)
    return np.column_stack([np.ones_like(u), u, u * u])


def fit_growth_covariates(history: pd.DataFrame, t_star: int) -> GrowthFit:
    """Predicted level at t*-1 and mean annual change over [t*-4, t*-1].

    ``history`` is indexed by school id with one column per calendar year
    (NaN when a year is missing); all years must precede ``t_star``.

    Schools with at least three years inside the four-year window get a
    per-school quadratic least-squares fit shrunk toward the population mean
    by precision weights. With exactly two usable years the growth is the
    constant annual change between them and the level is the latest raw
    mean. With one year the level is the raw mean and the growth is the
    population mean growth.
    """
    years = np.array([int(c) for c in history.columns])
    if years.size and years.max() >= t_star:
        raise ArgumentError("history years must all precede t_star")
    values = history.to_numpy(dtype=float)
    rel = years - (t_star - 1)
    in_window = rel > -GROWTH_WINDOW

    model_rows, model_b, model_v, rss, dof = [], [], [], 0.0, 0
    fallback = {}
    dropped = {}
    for i, sid in enumerate(history.index):
        observed = ~np.isnan(values[i])
        win = observed & in_window
        if win.sum() >= 3:
            X = _quadratic_design(rel[win])
            y = values[i, win]
            xtx_inv = np.linalg.inv(X.T @ X)
            b = xtx_inv @ X.T @ y
            resid = y - X @ b
            rss += float(resid @ resid)
            dof += int(win.sum()) - 3
            model_rows.append(i)
            model_b.append(b)
            model_v.append(xtx_inv)
        elif observed.sum() >= 1:
            fallback[i] = np.flatnonzero(observed)
        else:
            dropped[sid] = "no pre-period achievement history"
            log.info("school %s dropped: no pre-period achievement history", sid)

    n_model = len(model_rows)
    sigma2 = rss / dof if dof > 0 else 0.0
    gamma = np.zeros(3)
    tau = np.zeros((3, 3))
    shrunk = {}
    if n_model and not sigma2 > 0:
        # exact fits: nothing to shrink
        B = np.array(model_b)
        gamma = B.mean(axis=0)
        shrunk = dict(zip(model_rows, B))
    elif n_model:
        B = np.array(model_b)
        V = np.array(model_v) * sigma2
        if n_model > 1:
            tau = np.cov(B, rowvar=False, ddof=1) - V.mean(axis=0)
            evals, evecs = np.linalg.eigh((tau + tau.T) / 2)
            tau = (evecs * np.clip(evals, 0.0, None)) @ evecs.T
        W = np.array([np.linalg.pinv(tau + v) for v in V])
        gamma = np.linalg.pinv(W.sum(axis=0)) @ np.einsum("nij,nj->i", W, B)
        for row, b, w in zip(model_rows, B, W):
            shrunk[row] = gamma + tau @ w @ (b - gamma)

    def model_growth(b):
        # average annual change between t*-4 and t*-1 of the quadratic
        return b[1] - (GROWTH_WINDOW - 1) * b[2]

    two_year_growth = []
    for i, idx in fallback.items():
        if idx.size >= 2:
            a, b = idx[-2], idx[-1]
            two_year_growth.append((values[i, b] - values[i, a]) / (years[b] - years[a]))
    if n_model:
        pooled_growth = float(model_growth(gamma))
    elif two_year_growth:
        pooled_growth = float(np.mean(two_year_growth))
    else:
        pooled_growth = 0.0

    records = {}
    for row, b in shrunk.items():
        n_obs = int((~np.isnan(values[row]) & in_window).sum())
        records[row] = (float(b[0]), float(model_growth(b)), n_obs, "model")
    for i, idx in fallback.items():
        latest = idx[-1]
        if idx.size >= 2:
            a = idx[-2]
            growth = (values[i, latest] - values[i, a]) / (years[latest] - years[a])
            records[i] = (float(values[i, latest]), float(growth), 2, "two_year")
        else:
            records[i] = (float(values[i, latest]), pooled_growth, 1, "one_year")

    rows = sorted(records)
    table = pd.DataFrame(
        [records[r] for r in rows],
        index=history.index[rows],
        columns=["level", "growth", "n_years", "method"],
    )
    raw = pd.DataFrame(
        np.array(model_b).reshape(-1, 3),
        index=history.index[model_rows],
        columns=["b0", "b1", "b2"],
    )
    return GrowthFit(table=table, dropped=dropped, gamma=gamma, tau=tau, sigma2=sigma2,
                     raw_coefficients=raw)


@dataclass
class ColumnInfo:
    name: str
    kind: str  # "binary" or "continuous"
    transform: str
    source: str
    indicator: bool = False

    def to_dict(self):
        return {
            "name": self.name,
            "type": self.kind,
            "transform": self.transform,
            "source": self.source,
            "indicator": self.indicator,
        }


@dataclass
class Design:
    """Standardized school-level matching design.

    ``features`` (standardized) and ``raw`` (imputed, transformed, unscaled)
    share the same index, sorted by school id, and the same columns.
    """

    features: pd.DataFrame
    raw: pd.DataFrame
    n_students: pd.Series
    columns: list[ColumnInfo]
    center: pd.Series
    scale: pd.Series
    missing: pd.DataFrame
    warnings: list[str] = field(default_factory=list)
    dropped: dict[str, str] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return list(self.features.columns)

    def info(self, name) -> ColumnInfo:
        return next(c for c in self.columns if c.name == name)

    @property
    def continuous(self) -> list[str]:
        return [c.name for c in self.columns if c.kind == "continuous"]

    @property
    def binary(self) -> list[str]:
        return [c.name for c in self.columns if c.kind == "binary"]

    @property
    def indicators(self) -> list[str]:
        return [c.name for c in self.columns if c.indicator]


def prepare_design(pop: PopulationSnapshot, t_star: int | None = None) -> Design:
    """Build the school-level design matrix for ``pop``.

    Budgets get ``log(1 + x)``; missing continuous values take the column mean
    of the observed entries and missing binary values the column mode;
    every non-binary column is scaled to mean 0 and variance 1 over the
    population. Pool schools without any achievement history are dropped;
    selected schools keep their row with imputed growth covariates.
    """
    t_star = pop.config.t_star if t_star is None else t_star
    schools = pop.schools.set_index("school_id").sort_index()
    warnings: list[str] = []
    dropped: dict[str, str] = {}

    means, agg_warn = aggregate_to_school(pop.students, schools.index)
    warnings.extend(agg_warn)
    means.columns = [f"mean_{c}" for c in means.columns]

    def growth_for(prefix):
        cols = [c for c in schools.columns if c.startswith(prefix)]
        hist = schools[cols].copy()
        hist.columns = [int(c[len(prefix):]) for c in cols]
        hist = hist.loc[:, [c for c in hist.columns if c < t_star]]
        return fit_growth_covariates(hist, t_star)

    points = growth_for("points_")
    grade = growth_for("grade_level_")
    growth = pd.DataFrame(index=schools.index, columns=list(GROWTH_COLUMNS), dtype=float)
    growth.loc[points.table.index, "academic_level"] = points.table["level"]
    growth.loc[points.table.index, "academic_growth"] = points.table["growth"]
    growth.loc[grade.table.index, "grade_level_growth"] = grade.table["growth"]

    keep = pd.Series(True, index=schools.index)
    for sid, reason in points.dropped.items():
        if not schools.at[sid, "selected"]:
            keep[sid] = False
            dropped[sid] = reason
            warnings.append(f"school {sid}: {reason}; dropped from comparison pool")
    no_students = schools.index.difference(means.index)
    keep[no_students] = False
    for sid in no_students:
        dropped[sid] = "no students in cohort"

    raw = pd.concat(
        [means.reindex(schools.index), schools[list(SCHOOL_COVARIATES)].astype(float), growth],
        axis=1,
    ).loc[keep]
    for name in BUDGET_COVARIATES:
        raw[name] = np.log1p(raw[name])
    missing = raw.isna()

    columns = []
    for name in raw.columns:
        if name in SCHOOL_BINARY:
            mode = raw[name].mode(dropna=True)
            raw[name] = raw[name].fillna(float(mode.min()) if len(mode) else 0.0)
            kind = "binary"
        else:
            raw[name] = raw[name].fillna(raw[name].mean())
            kind = "continuous"
        if name.startswith("mean_"):
            source = "student_mean"
        elif name in GROWTH_COLUMNS:
            source = "growth"
        else:
            source = "school"
        indicator = name in SCHOOL_BINARY or name[len("mean_"):] in STUDENT_BINARY
        transform = "log1p" if name in BUDGET_COVARIATES else "none"
        if kind == "continuous":
            transform = "log1p+standardize" if transform == "log1p" else "standardize"
        columns.append(ColumnInfo(name, kind, transform, source, indicator))

    kept_columns = []
    for info in columns:
        col = raw[info.name]
        if col.nunique() <= 1 or (info.kind == "continuous" and col.std(ddof=0) == 0):
            warnings.append(f"column {info.name}: zero variance, excluded")
            log.warning("column %s has zero variance; excluded", info.name)
            continue
        kept_columns.append(info)
    names = [c.name for c in kept_columns]
    raw = raw[names]
    missing = missing[names]

    center = pd.Series(0.0, index=names)
    scale = pd.Series(1.0, index=names)
    for info in kept_columns:
        if info.kind == "continuous":
            center[info.name] = raw[info.name].mean()
            scale[info.name] = raw[info.name].std(ddof=0)
    features = (raw - center) / scale

    return Design(
        features=features,
        raw=raw,
        n_students=schools.loc[keep, "n_students"].astype(int),
        columns=kept_columns,
        center=center,
        scale=scale,
        missing=missing,
        warnings=warnings,
        dropped=dropped,
    )


def export_design(design: Design, out_dir, stem="design") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}.csv"
    manifest_path = out / f"{stem}_manifest.json"
    frame = design.features.copy()
    frame.insert(0, "n_students", design.n_students)
    frame.index.name = "school_id"
    frame.to_csv(csv_path, float_format="%.17g")
    manifest = {
        "format": "wscbias-design/1",
        "columns": [c.to_dict() for c in design.columns],
        "center": {k: float(v) for k, v in design.center.items()},
        "scale": {k: float(v) for k, v in design.scale.items()},
        "warnings": design.warnings,
        "dropped": design.dropped,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return {"design": csv_path, "manifest": manifest_path}


def load_design(in_dir, stem="design") -> Design:
    src = Path(in_dir)
    frame = pd.read_csv(src / f"{stem}.csv", index_col="school_id", dtype={"school_id": str},
                        float_precision="round_trip")
    manifest = json.loads((src / f"{stem}_manifest.json").read_text())
    columns = [
        ColumnInfo(c["name"], c["type"], c["transform"], c["source"], c["indicator"])
        for c in manifest["columns"]
    ]
    n_students = frame.pop("n_students").astype(int)
    frame = frame.astype(float)
    center = pd.Series(manifest["center"])[frame.columns]
    scale = pd.Series(manifest["scale"])[frame.columns]
    raw = frame * scale + center
    return Design(
        features=frame,
        raw=raw,
        n_students=n_students,
        columns=columns,
        center=center,
        scale=scale,
        missing=pd.DataFrame(False, index=frame.index, columns=frame.columns),
        warnings=list(manifest.get("warnings", [])),
        dropped=dict(manifest.get("dropped", {})),
    )

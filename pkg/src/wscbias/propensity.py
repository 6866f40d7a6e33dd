"""Propensity-score models for trial participation and covariate balance.

Three candidate logistic specifications are fitted by iteratively reweighted
least squares: main effects only, main effects plus interactions of the
significant covariates with every other covariate, and the interacted model
plus natural cubic spline terms for the continuous covariates. The candidate
whose matched sample leaves the fewest covariates imbalanced wins.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, stats
from scipy.special import expit

from .errors import ArgumentError, DegenerateLabelsError, NoOverlapError

log = logging.getLogger(__name__)

SPEC_KINDS = ("baseline", "interacted", "flexible")
GRADIENT_TOL = 1e-8
MAX_ITER = 50
LOGIT_CLIP = 15.0
SMD_THRESHOLD = 0.25
SPLINE_DF = 4
SPLINE_MIN_UNIQUE = 10
RANK_TOL = 1e-7


@dataclass(frozen=True)
class Term:
    """One model-matrix column.

    ``kind`` is ``main``, ``interaction`` or ``spline``. Spline terms carry
    the five knots of their natural cubic basis, the basis index (0, 1, 2
    for the three nonlinear columns) and a fixed divisor that keeps the
    column on a unit scale.
    """

    kind: str
    columns: tuple[str, ...]
    knots: tuple[float, ...] = ()
    index: int = 0
    scale: float = 1.0

    @property
    def name(self) -> str:
        if self.kind == "main":
            return self.columns[0]
        if self.kind == "interaction":
            return ":".join(self.columns)
        return f"ns({self.columns[0]})[{self.index + 1}]"

    def evaluate(self, frame: pd.DataFrame) -> np.ndarray:
        if self.kind == "main":
            return frame[self.columns[0]].to_numpy(dtype=float)
        if self.kind == "interaction":
            a, b = self.columns
            return frame[a].to_numpy(dtype=float) * frame[b].to_numpy(dtype=float)
        x = frame[self.columns[0]].to_numpy(dtype=float)
        return natural_spline_basis(x, self.knots)[:, self.index] / self.scale


@dataclass(frozen=True)
class PropensitySpec:
    kind: str
    terms: tuple[Term, ...]

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.terms]

    def term_set(self) -> set[str]:
        return set(self.names)


def natural_spline_basis(x, knots) -> np.ndarray:
    """Nonlinear columns of the natural cubic spline basis.

    With K knots the truncated-power construction gives K - 2 columns
    beyond the linear term; the basis is linear outside the boundary knots.
    """
    x = np.asarray(x, dtype=float)
    k = np.asarray(knots, dtype=float)
    last = k[-1]

    def d(j):
        return (np.clip(x - k[j], 0, None) ** 3 - np.clip(x - last, 0, None) ** 3) / (last - k[j])

    d_last = d(len(k) - 2)
    return np.column_stack([d(j) - d_last for j in range(len(k) - 2)])


def spline_knots(x, df: int = SPLINE_DF):
    """Boundary knots at the extremes and ``df - 2`` interior quantile knots.

    Returns None when the knots are not strictly increasing.
    """
    x = np.asarray(x, dtype=float)
    interior = np.quantile(x, np.arange(1, df) / df)
    knots = np.concatenate([[x.min()], interior, [x.max()]])
    if np.any(np.diff(knots) <= 0):
        return None
    return tuple(float(v) for v in knots)


def baseline_spec(columns) -> PropensitySpec:
    return PropensitySpec("baseline", tuple(Term("main", (c,)) for c in columns))


def build_model_matrix(design: pd.DataFrame, spec: PropensitySpec) -> np.ndarray:
    """Intercept followed by one column per term."""
    X = np.empty((len(design), len(spec.terms) + 1))
    X[:, 0] = 1.0
    values = {c: design[c].to_numpy(dtype=float) for c in design.columns}
    bases = {}
    for i, t in enumerate(spec.terms, start=1):
        if t.kind == "main":
            X[:, i] = values[t.columns[0]]
        elif t.kind == "interaction":
            X[:, i] = values[t.columns[0]] * values[t.columns[1]]
        else:
            key = (t.columns[0], t.knots)
            if key not in bases:
                bases[key] = natural_spline_basis(values[t.columns[0]], t.knots)
            X[:, i] = bases[key][:, t.index] / t.scale
    return X


def _independent_columns(X: np.ndarray) -> np.ndarray:
    """Indices of columns kept after dropping near-collinear ones.

    Columns are considered in order, so later terms are the ones dropped.
    """
    keep = np.arange(X.shape[1])
    norms = np.linalg.norm(X, axis=0)
    keep = keep[norms > 0]
    while True:
        R = linalg.qr(X[:, keep], mode="r")[0]
        diag = np.abs(np.diag(R))
        bad = diag <= RANK_TOL * norms[keep]
        if not bad.any():
            return keep
        keep = keep[~bad]


@dataclass
class FittedPropensity:
    """A fitted logistic propensity model.

    ``scores`` and ``logit_scores`` are indexed by school id; the logit is
    the linear predictor clipped to +/-15 and ``scores`` is its inverse
    logit. Terms dropped for collinearity get a zero coefficient and are
    listed in ``dropped_terms``.
    """

    spec: PropensitySpec
    coefficients: pd.Series
    std_errors: pd.Series
    scores: pd.Series
    logit_scores: pd.Series
    converged: bool
    iterations: int
    gradient_norm: float
    separated: bool = False
    dropped_terms: list[str] = field(default_factory=list)

    def z_values(self) -> pd.Series:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coefficients / self.std_errors

    def significant(self, alpha: float = 0.05) -> list[str]:
        """Main-effect columns with a two-sided Wald p-value below ``alpha``."""
        crit = stats.norm.ppf(1 - alpha / 2)
        z = self.z_values()
        out = []
        for t in self.spec.terms:
            if t.kind == "main" and t.name not in self.dropped_terms:
                if np.isfinite(z[t.name]) and abs(z[t.name]) > crit:
                    out.append(t.columns[0])
        return out


def fit_logistic(design: pd.DataFrame, labels, spec: PropensitySpec) -> FittedPropensity:
    """Maximum-likelihood logistic regression by IRLS.

    Iterates Newton steps (with step halving when the log-likelihood drops)
    until the largest score-equation component is below 1e-8 or 50
    iterations pass. If any linear predictor leaves [-15, 15] the data are
    treated as separated: the fit stops, is flagged ``converged=False`` and
    its scores are computed from the clipped predictor.

    Parameters
    ----------
    design : DataFrame indexed by school id
    labels : array-like of 0/1 aligned with ``design`` rows
    spec : PropensitySpec
    """
    y_all = pd.Series(np.asarray(labels, dtype=float), index=design.index)
    if not np.isin(y_all.to_numpy(), (0.0, 1.0)).all():
        raise ArgumentError("labels must be 0/1")
    n_pos = y_all.sum()
    if n_pos == 0 or n_pos == len(y_all):
        raise DegenerateLabelsError("labels are all one class")
    order = np.argsort(design.index.to_numpy(), kind="mergesort")
    frame = design.iloc[order]
    y = y_all.to_numpy()[order]
    X_full = build_model_matrix(frame, spec)
    if not np.isfinite(X_full).all():
        raise ArgumentError("design contains non-finite values")
    names = ["(intercept)"] + spec.names
    keep = _independent_columns(X_full)
    dropped = [names[i] for i in range(len(names)) if i not in set(keep)]
    if dropped:
        log.debug("dropping collinear terms %s", dropped)
    X = X_full[:, keep]

    beta = np.zeros(X.shape[1])
    if keep[0] == 0:
        ybar = y.mean()
        beta[0] = np.log(ybar / (1 - ybar))

    def loglik(eta):
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))

    eta = X @ beta
    ll = loglik(eta)
    converged = separated = False
    iterations = 0
    H = None
    while True:
        p = expit(eta)
        grad = X.T @ (y - p)
        gnorm = float(np.max(np.abs(grad)))
        w = p * (1 - p)
        H = (X * w[:, None]).T @ X
        if gnorm < GRADIENT_TOL:
            converged = True
            break
        if iterations >= MAX_ITER:
            break
        try:
            step = linalg.solve(H, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        iterations += 1
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            eta_c = X @ cand
            ll_c = loglik(eta_c)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t /= 2
        beta, eta, ll = cand, eta_c, ll_c
        if np.max(np.abs(eta)) > LOGIT_CLIP:
            separated = True
            p = expit(eta)
            grad = X.T @ (y - p)
            gnorm = float(np.max(np.abs(grad)))
            w = p * (1 - p)
            H = (X * w[:, None]).T @ X
            break

    coef = np.zeros(len(names))
    se = np.full(len(names), np.nan)
    coef[keep] = beta
    try:
        cov = linalg.inv(H)
        se[keep] = np.sqrt(np.clip(np.diag(cov), 0, None))
    except (linalg.LinAlgError, ValueError):
        pass
    logit = np.clip(eta, -LOGIT_CLIP, LOGIT_CLIP)
    idx = frame.index
    logit_s = pd.Series(logit, index=idx).reindex(design.index)
    return FittedPropensity(
        spec=spec,
        coefficients=pd.Series(coef, index=names),
        std_errors=pd.Series(se, index=names),
        scores=pd.Series(expit(logit_s.to_numpy()), index=design.index),
        logit_scores=logit_s,
        converged=converged,
        iterations=iterations,
        gradient_norm=gnorm,
        separated=separated,
        dropped_terms=dropped,
    )


def enumerate_candidate_specs(baseline_fit: FittedPropensity, design: pd.DataFrame,
                              alpha: float = 0.05, continuous=None) -> list[PropensitySpec]:
    """Baseline, interacted and flexible specifications.

    Parameters
    ----------
    baseline_fit : converged main-effects fit
    design : DataFrame
        Rows the models are fitted on; spline knots and column scales come
        from these rows.
    alpha : significance level of the Wald tests that pick the covariates
        to interact
    continuous : iterable of str, optional
        Columns eligible for spline terms (default: every main effect with
        at least ten distinct values).
    """
    if not baseline_fit.converged:
        raise ArgumentError("baseline fit did not converge")
    base = baseline_fit.spec
    if base.kind != "baseline":
        raise ArgumentError("expected a baseline spec")
    columns = [t.columns[0] for t in base.terms]
    significant = baseline_fit.significant(alpha)
    pairs = []
    seen = set()
    for a in significant:
        for b in columns:
            if a == b:
                continue
            key = tuple(sorted((a, b), key=columns.index))
            if key not in seen:
                seen.add(key)
                pairs.append(key)
    if not pairs:
        log.info("no significant baseline coefficients; interacted spec equals baseline")
    interacted = PropensitySpec(
        "interacted", base.terms + tuple(Term("interaction", p) for p in pairs)
    )

    if continuous is None:
        continuous = [c for c in columns if design[c].nunique() >= SPLINE_MIN_UNIQUE]
    spline_terms = []
    for c in columns:
        if c not in continuous:
            continue
        x = design[c].to_numpy(dtype=float)
        knots = spline_knots(x)
        if knots is None:
            continue
        basis = natural_spline_basis(x, knots)
        for j in range(basis.shape[1]):
            sd = float(basis[:, j].std())
            spline_terms.append(Term("spline", (c,), knots, j, sd if sd > 0 else 1.0))
    flexible = PropensitySpec("flexible", interacted.terms + tuple(spline_terms))
    return [base, interacted, flexible]


@dataclass
class BalanceReport:
    """Standardized mean differences after matching.

    SMD = (mean over matched CT - mean over matched CO) / SD over the
    trimmed pool. A covariate with zero pooled SD gets SMD 0 and is listed
    in ``degenerate``.
    """

    smd: pd.Series
    violation_count: int
    n_covariates: int
    degenerate: list[str] = field(default_factory=list)
    threshold: float = SMD_THRESHOLD

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "covariate": self.smd.index,
            "smd": self.smd.to_numpy(),
            "violation": (self.smd.abs() > self.threshold).to_numpy(),
            "degenerate": [c in self.degenerate for c in self.smd.index],
        })

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def balance_report(matched, design: pd.DataFrame, covariates=None) -> BalanceReport:
    """Balance of a matched sample on the design covariates.

    Parameters
    ----------
    matched : MatchedSample
        Supplies the pairs and the trimmed pool ids.
    design : DataFrame indexed by school id
    covariates : list of str, optional
    """
    if not matched.pairs:
        raise ArgumentError("matched sample has no pairs")
    covariates = list(covariates if covariates is not None else design.columns)
    index = design.index
    ct = index.get_indexer([p.ct_id for p in matched.pairs])
    co = index.get_indexer([p.co_id for p in matched.pairs])
    pool = index.get_indexer(list(matched.pool_ids))
    if (ct < 0).any() or (co < 0).any() or (pool < 0).any():
        raise ArgumentError("matched schools missing from the design")
    F = design[covariates].to_numpy(dtype=float)
    pool_sd = F[pool].std(axis=0, ddof=1) if len(pool) > 1 else np.zeros(len(covariates))
    diff = F[ct].mean(axis=0) - F[co].mean(axis=0)
    ok = pool_sd > 0
    smd = pd.Series(np.where(ok, diff / np.where(ok, pool_sd, 1.0), 0.0), index=covariates)
    degenerate = [c for c, good in zip(covariates, ok) if not good]
    violations = int((smd.abs() > SMD_THRESHOLD).sum())
    return BalanceReport(smd=smd, violation_count=violations,
                         n_covariates=len(covariates), degenerate=degenerate)


@dataclass
class SpecChoice:
    """Outcome of the specification search."""

    fit: FittedPropensity
    matched: object
    balance: BalanceReport
    index: int
    violation_counts: list  # None for candidates that failed to match
    failures: dict = field(default_factory=dict)


def choose_index(violations, unmatched=None) -> int:
    """Fewest violations, ties to the earliest (simplest) candidate.

    Candidates with None violations are skipped. When ``unmatched`` counts
    are given, candidates leaving more CT schools unmatched than the best
    candidate are skipped first.
    """
    valid = [i for i, v in enumerate(violations) if v is not None]
    if not valid:
        raise NoOverlapError("no candidate specification produced a matched sample")
    if unmatched is not None:
        fewest = min(unmatched[i] for i in valid)
        valid = [i for i in valid if unmatched[i] == fewest]
    return min(valid, key=lambda i: (violations[i], i))


def select_spec(candidates, matcher, design: pd.DataFrame, covariates=None) -> SpecChoice:
    """Pick the candidate fit whose matched sample is best balanced.

    ``matcher`` maps a FittedPropensity to a MatchedSample and may raise
    NoOverlapError or MatchingError; such candidates are skipped. Returns
    the winning fit together with its matched sample.
    """
    from .errors import MatchingError

    matched, reports, violations, unmatched, failures = [], [], [], [], {}
    for i, fit in enumerate(candidates):
        try:
            m = matcher(fit)
            if not m.pairs:
                raise NoOverlapError("no CT school matched")
            rep = balance_report(m, design, covariates)
        except (NoOverlapError, MatchingError) as exc:
            failures[fit.spec.kind] = str(exc)
            matched.append(None)
            reports.append(None)
            violations.append(None)
            unmatched.append(None)
            continue
        matched.append(m)
        reports.append(rep)
        violations.append(rep.violation_count)
        unmatched.append(len(m.unmatched_ct))
    best = choose_index(violations, unmatched)
    return SpecChoice(fit=candidates[best], matched=matched[best], balance=reports[best],
                      index=best, violation_counts=violations, failures=failures)


def coefficients_frame(fit: FittedPropensity) -> pd.DataFrame:
    return pd.DataFrame({
        "term": fit.coefficients.index,
        "coefficient": fit.coefficients.to_numpy(),
        "std_error": fit.std_errors.to_numpy(),
    })

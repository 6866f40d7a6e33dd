"""Random-effects meta-analysis of the bias estimates.

Model: beta_hat_c ~ N(beta_c, sigma2_c), beta_c ~ N(nu, tau2), with sigma2_c
taken from the placebo reference. tau2 is the method-of-moments estimate
with an ICC-adjusted effective number of estimates, nu the random-effects
weighted mean, and the constrained empirical-Bayes estimates are shrunken
estimates stretched so that their sample variance equals tau2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, stats

from .errors import ArgumentError, RankDeficientError
from .reml import RandomInterceptModel

CI_GRID_STEP = 1e-3
CI_GRID_MAX = 1.0
CI_DRAWS = 2000
CI_LEVEL = 0.95


@dataclass
class MetaInput:
    """One row per (intervention, outcome) cell."""

    intervention: np.ndarray
    outcome: np.ndarray
    beta_hat: np.ndarray
    sigma2_hat: np.ndarray

    def __post_init__(self):
        self.intervention = np.asarray(self.intervention, dtype=object)
        self.outcome = np.asarray(self.outcome, dtype=object)
        self.beta_hat = np.asarray(self.beta_hat, dtype=float)
        self.sigma2_hat = np.asarray(self.sigma2_hat, dtype=float)
        n = len(self.beta_hat)
        if not (len(self.intervention) == len(self.outcome) == len(self.sigma2_hat) == n):
            raise ArgumentError("cell arrays differ in length")
        if not np.isfinite(self.beta_hat).all() or not np.isfinite(self.sigma2_hat).all():
            raise ArgumentError("cell values must be finite")
        if (self.sigma2_hat < 0).any():
            raise ArgumentError("sampling variances must be non-negative")

    def __len__(self):
        return len(self.beta_hat)

    @classmethod
    def from_arrays(cls, beta_hat, sigma2_hat, intervention=None, outcome=None):
        n = len(beta_hat)
        intervention = intervention if intervention is not None else [f"w{i}" for i in range(n)]
        outcome = outcome if outcome is not None else ["all"] * n
        return cls(intervention, outcome, beta_hat, sigma2_hat)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame):
        return cls(frame["intervention"], frame["outcome"], frame["beta_hat"], frame["sigma2_hat"])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"intervention": self.intervention, "outcome": self.outcome,
                             "beta_hat": self.beta_hat, "sigma2_hat": self.sigma2_hat})

    def _precision(self):
        if (self.sigma2_hat <= 0).any():
            raise ArgumentError("sampling variances must be positive")
        return 1.0 / self.sigma2_hat


def estimate_icc(cells: MetaInput) -> float:
    """Share of variance between interventions, from a REML random-intercept fit."""
    counts = pd.Series(cells.intervention).value_counts()
    if (counts >= 2).sum() < 2:
        raise ArgumentError("need at least two interventions with two or more outcomes")
    model = RandomInterceptModel(np.ones((len(cells), 1)), cells.intervention, ["(intercept)"])
    fit = model.fit(cells.beta_hat)
    return float(fit.ratio / (1.0 + fit.ratio))


def effective_sample_size(n_cells: int, k_outcomes: int, rho_hat: float) -> float:
    """Design-effect adjusted number of estimates: n / (1 + (k - 1) rho)."""
    if k_outcomes < 1 or n_cells % k_outcomes:
        raise ArgumentError("n_cells must be a multiple of k_outcomes")
    if not 0.0 <= rho_hat < 1.0:
        raise ArgumentError("rho_hat must lie in [0, 1)")
    return n_cells / (1.0 + (k_outcomes - 1) * rho_hat)


@dataclass
class Tau2Estimate:
    tau2: float
    Q: float
    beta_bar: float
    K: float


def tau2_mom(cells: MetaInput, K_effective: float) -> Tau2Estimate:
    """Method-of-moments between-cell variance.

    tau2 = max(0, (Q - (K - 1)) / (sum w - sum w^2 / sum w)) with w = 1/sigma2,
    Q = sum w (beta - beta_bar)^2 and beta_bar the w-weighted mean.
    """
    if len(cells) < 2:
        raise ArgumentError("need at least two cells")
    w = cells._precision()
    sw = w.sum()
    denom = sw - (w * w).sum() / sw
    if not denom > 0:
        raise ArgumentError("zero denominator in the moment estimator")
    beta_bar = float((cells.beta_hat * w).sum() / sw)
    Q = float((w * (cells.beta_hat - beta_bar) ** 2).sum())
    excess = Q - (K_effective - 1.0)
    tau2 = excess / denom if excess > 0 else 0.0
    return Tau2Estimate(tau2=float(tau2), Q=Q, beta_bar=beta_bar, K=float(K_effective))


def pooled_mean_nu(cells: MetaInput, tau2_hat: float) -> tuple[float, np.ndarray]:
    """Random-effects weighted mean and its weights 1 / (sigma2 + tau2)."""
    if tau2_hat < 0:
        raise ArgumentError("tau2_hat must be non-negative")
    total = cells.sigma2_hat + tau2_hat
    if (total <= 0).any():
        raise ArgumentError("weights undefined: sigma2 + tau2 must be positive")
    omega = 1.0 / total
    return float((cells.beta_hat * omega).sum() / omega.sum()), omega


def eb_constrained(cells: MetaInput, nu_hat: float, tau2_hat: float):
    """Shrunken and constrained empirical-Bayes estimates.

    Returns
    -------
    shrunken : beta* = lam nu + (1 - lam) beta_hat, lam = sigma2 / (sigma2 + tau2)
    constrained : mean(beta*) + c (beta* - mean(beta*)) with c set so the
        sample variance (n - 1 denominator) equals tau2
    lam : shrinkage factors (1 where sigma2 + tau2 = 0)
    """
    if tau2_hat < 0:
        raise ArgumentError("tau2_hat must be non-negative")
    s2 = cells.sigma2_hat
    total = s2 + tau2_hat
    lam = np.divide(s2, total, out=np.ones_like(s2), where=total > 0)
    shrunk = lam * nu_hat + (1.0 - lam) * cells.beta_hat
    center = shrunk.mean()
    if tau2_hat == 0:
        return shrunk, np.full_like(shrunk, center), lam
    var = shrunk.var(ddof=1) if len(shrunk) > 1 else 0.0
    if not var > 0:
        raise ArgumentError("shrunken estimates have zero variance; cannot rescale to tau2")
    c = np.sqrt(tau2_hat / var)
    return shrunk, center + c * (shrunk - center), lam


@dataclass
class MetaResult:
    nu_hat: float
    tau2_hat: float
    Q: float
    beta_bar: float
    K_effective: float
    rho_hat: float
    cells: MetaInput
    shrunken: np.ndarray
    constrained: np.ndarray
    lam: np.ndarray
    omega: np.ndarray

    @property
    def mean_abs_constrained(self) -> float:
        return float(np.mean(np.abs(self.constrained)))

    def scalars(self) -> dict:
        return {
            "nu_hat": self.nu_hat,
            "tau2_hat": self.tau2_hat,
            "Q": self.Q,
            "beta_bar": self.beta_bar,
            "K_effective": self.K_effective,
            "rho_hat": self.rho_hat,
            "mean_abs_constrained": self.mean_abs_constrained,
            "n_cells": len(self.cells),
        }

    def cells_frame(self) -> pd.DataFrame:
        frame = self.cells.to_frame()
        frame["lambda"] = self.lam
        frame["omega"] = self.omega
        frame["shrunken"] = self.shrunken
        frame["constrained"] = self.constrained
        return frame

    def save(self, json_path, csv_path):
        with open(json_path, "w") as fh:
            json.dump(self.scalars(), fh, indent=2, sort_keys=True)
        self.cells_frame().to_csv(csv_path, index=False, float_format="%.17g")


def meta_analysis(cells: MetaInput, k_outcomes: int | None = None, rho_hat: float | None = None) -> MetaResult:
    """Full cell-level meta-analysis: ICC, effective K, tau2, nu, EB estimates."""
    if k_outcomes is None:
        k_outcomes = int(pd.Series(cells.outcome).nunique())
    if rho_hat is None:
        rho_hat = estimate_icc(cells)
    K = effective_sample_size(len(cells), k_outcomes, rho_hat)
    t = tau2_mom(cells, K)
    nu, omega = pooled_mean_nu(cells, t.tau2)
    shrunk, constrained, lam = eb_constrained(cells, nu, t.tau2)
    return MetaResult(nu_hat=nu, tau2_hat=t.tau2, Q=t.Q, beta_bar=t.beta_bar, K_effective=K,
                      rho_hat=rho_hat, cells=cells, shrunken=shrunk, constrained=constrained,
                      lam=lam, omega=omega)


@dataclass
class InterventionMeta:
    tau2_hat: float
    ci_95: tuple
    Q: float
    K: int
    beta_w: pd.Series
    sigma_w: pd.Series
    grid_accepted: int = 0


def _q_statistic(beta, w):
    """Q for each column of ``beta`` (rows are interventions)."""
    bar = (beta * w[:, None]).sum(axis=0) / w.sum()
    return ((beta - bar) ** 2 * w[:, None]).sum(axis=0)


def intervention_level_meta(cells: MetaInput, seed: int = 0, grid_step: float = CI_GRID_STEP,
                            grid_max: float = CI_GRID_MAX, draws: int = CI_DRAWS) -> InterventionMeta:
    """Meta-analysis of per-intervention averages with a test-inversion CI.

    Each intervention's estimate is the mean of its outcome cells and its
    standard error the mean of the cells' standard errors (SDs, not
    variances). tau2 uses the moment estimator with K = number of
    interventions. The 95% interval collects every tau2 on a grid whose
    simulated Q distribution (``draws`` parametric draws, common random
    numbers across grid points) has the observed Q inside its central 95%.
    """
    frame = cells.to_frame()
    ids = sorted(set(frame["intervention"]))
    counts = frame.groupby("intervention")["outcome"].nunique()
    n_outcomes = frame["outcome"].nunique()
    if (counts != n_outcomes).any() or len(frame) != len(ids) * n_outcomes:
        raise ArgumentError("every intervention needs exactly one cell per outcome")
    grouped = frame.groupby("intervention", sort=True)
    beta_w = grouped["beta_hat"].mean()
    sigma_w = grouped["sigma2_hat"].apply(lambda s: float(np.mean(np.sqrt(s))))
    sub = MetaInput(beta_w.index.to_numpy(), np.array(["mean"] * len(beta_w)),
                    beta_w.to_numpy(), sigma_w.to_numpy() ** 2)
    K = len(beta_w)
    t = tau2_mom(sub, K)

    s2 = sub.sigma2_hat
    w = 1.0 / s2
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    z = rng.standard_normal((K, draws))
    lo_q, hi_q = (1 - CI_LEVEL) / 2, 1 - (1 - CI_LEVEL) / 2
    grid = np.arange(0.0, grid_max + grid_step / 2, grid_step)
    accepted = []
    for g in grid:
        q = _q_statistic(z * np.sqrt(s2 + g)[:, None], w)
        a, b = np.quantile(q, [lo_q, hi_q])
        if a <= t.Q <= b:
            accepted.append(g)
    ci = (float(min(accepted)), float(max(accepted))) if accepted else (0.0, 0.0)
    return InterventionMeta(tau2_hat=t.tau2, ci_95=ci, Q=t.Q, K=K, beta_w=beta_w, sigma_w=sigma_w,
                            grid_accepted=len(accepted))


@dataclass
class OlsFit:
    names: list
    coefficients: np.ndarray
    std_errors: np.ndarray
    t_values: np.ndarray
    p_values: np.ndarray
    r2: float
    f_stat: float
    f_pvalue: float
    df_resid: int
    n: int = 0
    extra: dict = field(default_factory=dict)

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({"term": self.names, "coefficient": self.coefficients,
                             "std_error": self.std_errors, "t": self.t_values, "p": self.p_values})

    def to_dict(self) -> dict:
        return {
            "terms": self.table().to_dict(orient="list"),
            "r2": self.r2,
            "f_stat": self.f_stat,
            "f_pvalue": self.f_pvalue,
            "df_resid": self.df_resid,
            "n": self.n,
        }


def ols(y, X, names) -> OlsFit:
    """Least squares with an intercept column already in ``X``.

    Conventional (homoskedastic) standard errors; the F statistic tests all
    slopes jointly. Raises RankDeficientError naming collinear columns.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if n < p + 2:
        raise ArgumentError(f"need at least {p + 2} observations for {p} coefficients")
    R, piv = linalg.qr(X, mode="r", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int((diag > diag[0] * 1e-10).sum()) if diag.size and diag[0] > 0 else 0
    if rank < p:
        raise RankDeficientError([names[i] for i in piv[rank:]])
    xtx_inv = linalg.inv(X.T @ X)
    beta = xtx_inv @ X.T @ y
    resid = y - X @ beta
    df = n - p
    sigma2 = float(resid @ resid) / df
    se = np.sqrt(np.diag(xtx_inv) * sigma2)
    with np.errstate(divide="ignore", invalid="ignore"):
        tv = np.where(se > 0, beta / se, 0.0)
    pv = 2 * stats.t.sf(np.abs(tv), df)
    tss = float(((y - y.mean()) ** 2).sum())
    rss = float(resid @ resid)
    r2 = 1.0 - rss / tss if tss > 0 else 0.0
    k = p - 1
    if k > 0 and rss > 0:
        f = ((tss - rss) / k) / (rss / df)
        fp = float(stats.f.sf(f, k, df))
    else:
        f, fp = 0.0, 1.0
    return OlsFit(list(names), beta, se, tv, pv, float(r2), float(f), fp, df, n)


PREDICTOR_SETS = ("outcome_dummies", "sample_size", "violation_count")


def predict_bias_magnitude(frame: pd.DataFrame, predictors: str, response: str = "abs_beta") -> OlsFit:
    """Regress |beta_hat| on one of three predictor sets.

    ``frame`` needs ``abs_beta`` (or ``response``) plus ``outcome`` for
    ``outcome_dummies`` (math is the reference level), ``n_students`` for
    ``sample_size`` (entered in thousands), or ``violation_count``.
    """
    y = frame[response].to_numpy(dtype=float)
    n = len(frame)
    if predictors == "outcome_dummies":
        levels = sorted(set(frame["outcome"]) - {"math"})
        cols = [(frame["outcome"] == lv).to_numpy(dtype=float) for lv in levels]
        names = ["(intercept)"] + [lv.upper() for lv in levels]
    elif predictors == "sample_size":
        cols = [frame["n_students"].to_numpy(dtype=float) / 1000.0]
        names = ["(intercept)", "sample_size_thousands"]
    elif predictors == "violation_count":
        cols = [frame["violation_count"].to_numpy(dtype=float)]
        names = ["(intercept)", "violation_count"]
    else:
        raise ArgumentError(f"predictors must be one of {PREDICTOR_SETS}")
    X = np.column_stack([np.ones(n)] + cols)
    return ols(y, X, names)

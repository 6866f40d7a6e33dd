"""One intervention's propensity, matching and multilevel estimation steps.

Shared by the observed analysis and by every match-mode null replicate, so
the placebo reference runs exactly the same procedure as the real estimate.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .biasest import StudentTable, fit_mlm_outcomes, mlm_design
from .covariates import Design
from .errors import ArgumentError, NoOverlapError
from .matching import match_arrays
from .propensity import (
    SPEC_KINDS,
    PropensitySpec,
    SpecChoice,
    baseline_spec,
    enumerate_candidate_specs,
    fit_logistic,
    select_spec,
)


@dataclass(frozen=True)
class AnalysisOptions:
    """Knobs of the per-intervention procedure.

    ``include_treated`` adds the trial's treated schools as positives when
    fitting propensity scores; they never enter matching.
    """

    alpha: float = 0.05
    caliper: float | None = None
    strict_matching: bool = False
    include_treated: bool = True


@dataclass
class InterventionAnalysis:
    covariates: list
    dropped_indicators: list
    fits: list
    choice: SpecChoice
    mlm: dict
    naive: dict = field(default_factory=dict)

    @property
    def matched(self):
        return self.choice.matched

    @property
    def balance(self):
        return self.choice.balance


def matching_covariates(design: Design, ct_ids) -> tuple[list, list]:
    """Design columns minus indicators that are constant across the CT schools."""
    feats = design.features
    info = {c.name: c for c in design.columns}
    keep, dropped = [], []
    for c in design.names:
        if info[c].indicator and feats.loc[list(ct_ids), c].nunique() <= 1:
            dropped.append(c)
        else:
            keep.append(c)
    return keep, dropped


def candidate_fits(frame: pd.DataFrame, labels, alpha: float) -> list:
    """Fitted baseline, interacted and flexible models (reusing identical fits)."""
    base = fit_logistic(frame, labels, baseline_spec(list(frame.columns)))
    if not base.converged:
        return [base]
    specs = enumerate_candidate_specs(base, frame, alpha)
    fits = [base]
    for spec in specs[1:]:
        prev = fits[-1]
        if spec.term_set() == prev.spec.term_set():
            fits.append(dataclasses.replace(prev, spec=PropensitySpec(spec.kind, spec.terms)))
        else:
            fits.append(fit_logistic(frame, labels, spec))
    return fits


def analyze_intervention(design: Design, table: StudentTable, ct_ids, pool_ids, sds: dict,
                         treated_ids=(), options: AnalysisOptions = AnalysisOptions(),
                         order_seed: int = 0, outcomes=None) -> InterventionAnalysis:
    """Propensity-spec search, matching and multilevel bias for one intervention.

    Parameters
    ----------
    design : Design with rows for every CT, treated and pool school
    table : StudentTable
    ct_ids : schools playing the experimental controls
    pool_ids : potential comparison schools (must exclude ``ct_ids``)
    sds : outcome -> population SD
    treated_ids : extra positives for the propensity fit
    order_seed : seed of the greedy processing order
    """
    ct_ids = sorted(ct_ids)
    pool_ids = sorted(pool_ids)
    treated_ids = sorted(treated_ids) if options.include_treated else []
    if not ct_ids or not pool_ids:
        raise ArgumentError("CT set and pool must be non-empty")
    if set(ct_ids) & set(pool_ids):
        raise ArgumentError("CT schools overlap the pool")
    covariates, dropped = matching_covariates(design, ct_ids)
    feats = design.features[covariates]
    F = feats.to_numpy(dtype=float)
    positives = ct_ids + [s for s in treated_ids if s not in set(ct_ids)]
    ids = positives + pool_ids
    pos = feats.index.get_indexer(ids)
    if (pos < 0).any():
        raise ArgumentError("schools missing from the design")
    frame = pd.DataFrame(F[pos], index=ids, columns=covariates)
    labels = [1] * len(positives) + [0] * len(pool_ids)
    fits = candidate_fits(frame, labels, options.alpha)

    n_ct, n_pos = len(ct_ids), len(positives)
    ct_x = F[pos[:n_ct]]
    pool_x = F[pos[n_pos:]]
    pool_arr = np.array(pool_ids, dtype=object)

    def matcher(fit):
        logit = fit.logit_scores.to_numpy()
        ct_l, pool_l = logit[:n_ct], logit[n_pos:]
        inside = (pool_l >= ct_l.min()) & (pool_l <= ct_l.max())
        if not inside.any():
            raise NoOverlapError("no pool school inside the CT logit range")
        return match_arrays(ct_ids, ct_x, ct_l, list(pool_arr[inside]), pool_x[inside],
                            pool_l[inside], caliper_width=options.caliper,
                            order_seed=order_seed, strict=options.strict_matching,
                            n_trimmed=int((~inside).sum()))

    choice = select_spec(fits, matcher, feats, covariates)
    mlm_x = mlm_design(table, choice.matched.ct_ids, choice.matched.co_ids, feats)
    mlm = fit_mlm_outcomes(table, mlm_x, sds, outcomes)
    return InterventionAnalysis(covariates=covariates, dropped_indicators=dropped, fits=fits,
                                choice=choice, mlm=mlm)


__all__ = ["AnalysisOptions", "InterventionAnalysis", "analyze_intervention",
           "candidate_fits", "matching_covariates", "SPEC_KINDS"]

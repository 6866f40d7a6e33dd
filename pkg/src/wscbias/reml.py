"""Random-intercept linear mixed model fitted by restricted maximum likelihood.

y_ij = x_ij' beta + a_j + e_ij with a_j ~ N(0, s_a^2) and e_ij ~ N(0, s^2).
For a fixed ratio r = s_a^2 / s^2 the GLS estimate of beta and the profiled
residual variance have closed forms in terms of per-group sums, because
V_j^-1 = (I - r / (1 + n_j r) 11') / s^2. The REML criterion is then a
function of r alone, maximised on log r by a coarse grid followed by
golden-section refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import ArgumentError, ConvergenceError, RankDeficientError

LOG_RATIO_GRID = np.arange(-14.0, 8.0 + 1e-9, 1.0)
LOG_RATIO_TOL = 1e-8
MAX_EVALUATIONS = 200
SIGMA2_FLOOR = 1e-10
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class RemlFit:
    beta: np.ndarray
    cov_beta: np.ndarray
    sigma2: float
    sigma_a2: float
    ratio: float
    loglik: float
    converged: bool
    n_evaluations: int
    trace: list = field(default_factory=list)
    saturated: bool = False

    @property
    def se_beta(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov_beta), 0.0, None))

    @property
    def icc(self) -> float:
        return self.sigma_a2 / (self.sigma_a2 + self.sigma2)


class RandomInterceptModel:
    """Precomputed sufficient statistics for one design and grouping.

    Parameters
    ----------
    X : (N, p) array, full column rank
    groups : length-N array of group labels
    names : optional column names used in error messages
    """

    def __init__(self, X, groups, names=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ArgumentError("X must be two-dimensional")
        groups = np.asarray(groups)
        if groups.shape[0] != X.shape[0]:
            raise ArgumentError("groups and X disagree in length")
        self.n, self.p = X.shape
        if self.n <= self.p:
            raise ArgumentError("need more observations than fixed effects")
        # stable sort so that sums run in a fixed order regardless of labels
        labels, inverse = np.unique(groups, return_inverse=True)
        self.order = np.argsort(inverse, kind="mergesort")
        g = inverse[self.order]
        self.X = X[self.order]
        starts = np.flatnonzero(np.r_[True, g[1:] != g[:-1]])
        self.starts = starts
        self.sizes = np.diff(np.r_[starts, self.n]).astype(float)
        self.n_groups = len(starts)
        self.XtX = self.X.T @ self.X
        self.Sx = np.add.reduceat(self.X, starts, axis=0)
        names = list(names) if names is not None else [f"x{i}" for i in range(self.p)]
        rank = np.linalg.matrix_rank(self.X)
        if rank < self.p:
            R = linalg.qr(self.X, mode="r", pivoting=True)
            piv = R[1]
            raise RankDeficientError([names[i] for i in piv[rank:]])
        self.saturated = self._groups_in_span()

    def _groups_in_span(self) -> bool:
        """True when every group indicator lies in the column space of X.

        Then the REML criterion does not depend on the variance ratio and
        the GLS estimate equals OLS for every ratio.
        """
        if self.n_groups > self.p:
            return False
        Q, _ = np.linalg.qr(self.X)
        # residual of each indicator after projection onto span(X)
        Qs = np.add.reduceat(Q, self.starts, axis=0)
        resid = self.sizes - np.einsum("gk,gk->g", Qs, Qs)
        return bool(np.all(resid <= 1e-9 * self.sizes))

    def _prepare(self, y):
        y = np.asarray(y, dtype=float)[self.order]
        return y, float(y @ y), self.X.T @ y, np.add.reduceat(y, self.starts)

    def _evaluate(self, ratio, stats):
        y, yty, Xty, Sy = stats
        c = ratio / (1.0 + self.sizes * ratio)
        A = self.XtX - (self.Sx * c[:, None]).T @ self.Sx
        b = Xty - self.Sx.T @ (c * Sy)
        cho = linalg.cho_factor(A)
        beta = linalg.cho_solve(cho, b)
        quad = yty - float(c @ (Sy * Sy)) - float(b @ beta)
        sigma2 = max(quad / (self.n - self.p), SIGMA2_FLOOR)
        logdet_a = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))
        logdet_v = float(np.sum(np.log1p(self.sizes * ratio)))
        ll = -0.5 * ((self.n - self.p) * (math.log(sigma2) + 1.0 + math.log(2 * math.pi))
                     + logdet_v + logdet_a)
        return ll, beta, sigma2, cho

    def fit(self, y, ratio=None) -> RemlFit:
        """REML fit, or the GLS fit at a fixed variance ratio.

        When the fixed effects absorb every group (``saturated``) the ratio
        is unidentified and the fit is the OLS fit at ratio 0.

        Raises ConvergenceError (carrying the (log-ratio, criterion) trace)
        when the search needs more than 200 criterion evaluations or the
        optimum runs off the top of the ratio grid.
        """
        stats = self._prepare(y)
        trace = []

        def crit(theta):
            if len(trace) >= MAX_EVALUATIONS:
                raise ConvergenceError("REML profile search exceeded 200 evaluations", trace)
            val = self._evaluate(math.exp(theta), stats)[0]
            trace.append((theta, val))
            return val

        converged = True
        if ratio is None and self.saturated:
            ratio = 0.0
        if ratio is not None:
            if ratio < 0:
                raise ArgumentError("ratio must be non-negative")
            best_ratio = float(ratio)
        else:
            values = [crit(t) for t in LOG_RATIO_GRID]
            k = int(np.argmax(values))
            if k == len(values) - 1:
                raise ConvergenceError("REML optimum beyond the largest variance ratio", trace)
            lo = LOG_RATIO_GRID[max(k - 1, 0)]
            hi = LOG_RATIO_GRID[k + 1]
            a, b = lo, hi
            x1 = b - GOLDEN * (b - a)
            x2 = a + GOLDEN * (b - a)
            f1, f2 = crit(x1), crit(x2)
            while b - a > LOG_RATIO_TOL:
                if f1 >= f2:
                    b, x2, f2 = x2, x1, f1
                    x1 = b - GOLDEN * (b - a)
                    f1 = crit(x1)
                else:
                    a, x1, f1 = x1, x2, f2
                    x2 = a + GOLDEN * (b - a)
                    f2 = crit(x2)
            theta = (a + b) / 2
            best_ratio = math.exp(theta)
            best_val = crit(theta)
            # the criterion flattens as r -> 0; compare with the boundary itself
            if k == 0:
                zero_val = self._evaluate(0.0, stats)[0]
                trace.append((-math.inf, zero_val))
                if zero_val >= best_val:
                    best_ratio = 0.0
        ll, beta, sigma2, cho = self._evaluate(best_ratio, stats)
        cov = sigma2 * linalg.cho_solve(cho, np.eye(self.p))
        return RemlFit(beta=beta, cov_beta=cov, sigma2=sigma2, sigma_a2=best_ratio * sigma2,
                       ratio=best_ratio, loglik=ll, converged=converged,
                       n_evaluations=len(trace), trace=trace, saturated=self.saturated)


def fit_random_intercept(y, X, groups, ratio=None, names=None) -> RemlFit:
    """One-shot REML fit; see RandomInterceptModel."""
    return RandomInterceptModel(X, groups, names).fit(y, ratio)

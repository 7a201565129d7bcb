"""Regressions of per-run outcomes on regime dummies.

The design is the full 2x2x2 factorial in (VaR, ssban, TT) with all
interactions, i.e. saturated: fitted values are cell means (least squares)
or cell medians (median regression).  FGLS reweights by the inverse of the
within-cell residual variance, which is where the regimes differ most.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .stochastic import BOOTSTRAP, RngState

log = logging.getLogger(__name__)

TERMS = ["Intercept", "VaR", "ssban", "TT", "VaR*ssban", "VaR*TT", "ssban*TT",
         "VaR*TT*ssban"]


class RankDeficient(np.linalg.LinAlgError):
    pass


@dataclass
class RegressionResult:
    model: str
    terms: list[str]
    estimate: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    adj_r2: float
    n_obs: int
    residuals: np.ndarray | None = field(default=None, repr=False)
    notes: list[str] = field(default_factory=list)

    @property
    def stars(self) -> list[str]:
        return [significance_stars(p) for p in self.p]

    def coef(self, term: str) -> float:
        return float(self.estimate[self.terms.index(term)])

    def rows(self, response: str = "") -> list[dict]:
        out = [dict(model=self.model, response=response, term=term, estimate=b, se=s,
                    t=t, p=p, stars=st)
               for term, b, s, t, p, st in zip(self.terms, self.estimate, self.se,
                                               self.t, self.p, self.stars)]
        out.append(dict(model=self.model, response=response, term="adj_R2",
                        estimate=self.adj_r2, se=np.nan, t=np.nan, p=np.nan, stars=""))
        return out


def significance_stars(p: float) -> str:
    if not np.isfinite(p):
        return ""
    for cut, mark in ((0.001, "***"), (0.01, "**"), (0.05, "*"), (0.1, ".")):
        if p < cut:
            return mark
    return ""


def design_matrix(var, ssban, tt) -> np.ndarray:
    """Intercept, three dummies and their four interactions, in :data:`TERMS` order."""
    v = np.asarray(var, dtype=float)
    s = np.asarray(ssban, dtype=float)
    t = np.asarray(tt, dtype=float)
    for a in (v, s, t):
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("dummies must be 0/1")
    return np.column_stack([np.ones_like(v), v, s, t, v * s, v * t, s * t, v * t * s])


def _cells(X: np.ndarray):
    """Distinct design rows (sorted) and the cell index of every observation."""
    rows, inv = np.unique(X, axis=0, return_inverse=True)
    return rows, inv.reshape(-1)


def _adj_r2(y, resid, k, w=None):
    n = y.size
    w = np.ones(n) if w is None else w
    ybar = np.sum(w * y) / np.sum(w)
    sst = np.sum(w * (y - ybar) ** 2)
    if sst == 0 or n <= k:
        return float("nan")
    r2 = 1.0 - np.sum(w * resid**2) / sst
    return float(1.0 - (1.0 - r2) * (n - 1) / (n - k))


def _t_inference(est, se, df):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = est / se
    p = 2.0 * stats.t.sf(np.abs(t), df) if df > 0 else np.full_like(t, np.nan)
    # exact fits: se == 0
    p = np.where(se == 0, np.where(est == 0, 1.0, 0.0), p)
    return t, p


def _check_rank(X):
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficient("design matrix does not have full column rank")


def ols(X, y, terms: list[str] | None = None) -> RegressionResult:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    _check_rank(X)
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    df = n - k
    s2 = resid @ resid / df if df > 0 else float("nan")
    se = np.sqrt(np.clip(np.diag(np.linalg.inv(X.T @ X)) * s2, 0, None))
    t, p = _t_inference(beta, se, df)
    return RegressionResult("OLS", list(terms or TERMS[:k]), beta, se, t, p,
                            _adj_r2(y, resid, k), n, residuals=resid)


def fgls(X, y, terms: list[str] | None = None) -> RegressionResult:
    """Two-step FGLS with one error variance per design cell."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    first = ols(X, y, terms)
    rows, cell = _cells(X)
    counts = np.bincount(cell, minlength=len(rows))
    if np.any(counts < 2):
        raise ValueError("FGLS needs at least 2 observations per cell")
    ss = np.bincount(cell, weights=first.residuals**2, minlength=len(rows))
    cell_var = ss / (counts - 1)
    notes = []
    pooled = first.residuals @ first.residuals / max(n - k, 1)
    # round-off leaves tiny nonzero variances in exactly fitted cells
    zero = cell_var <= 1e-12 * pooled if pooled > 0 else cell_var <= 0
    if np.any(zero):
        msg = f"{int(zero.sum())} cell(s) with zero residual variance; using pooled OLS variance"
        log.warning(msg)
        notes.append(msg)
        cell_var = np.where(zero, pooled if pooled > 0 else 1.0, cell_var)
    w = 1.0 / cell_var[cell]
    XtW = X.T * w
    cov = np.linalg.inv(XtW @ X)
    beta = cov @ (XtW @ y)
    resid = y - X @ beta
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    t, p = _t_inference(beta, se, n - k)
    return RegressionResult("FGLS", list(terms or TERMS[:k]), beta, se, t, p,
                            _adj_r2(y, resid, k, w), n, residuals=resid, notes=notes)


def median_regression(X, y, terms: list[str] | None = None, n_boot: int = 1000,
                      seed: int = 0) -> RegressionResult:
    """Median regression for a saturated design, with run-level bootstrap SEs.

    Coefficients map the per-cell medians through the factorial system.  The
    bootstrap resamples observations with replacement inside each cell.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    rows, cell = _cells(X)
    if len(rows) != k:
        raise ValueError(f"design is not saturated: {len(rows)} cells for {k} terms")
    _check_rank(rows)
    groups = [np.sort(y[cell == c]) for c in range(len(rows))]
    if any(g.size == 0 for g in groups):
        raise ValueError("empty cell")
    medians = np.array([np.median(g) for g in groups])
    beta = np.linalg.solve(rows, medians)

    gen = RngState(seed, 0, BOOTSTRAP).generator()
    boot_meds = np.empty((n_boot, len(rows)))
    for c, g in enumerate(groups):
        idx = gen.integers(0, g.size, size=(n_boot, g.size))
        boot_meds[:, c] = np.median(g[idx], axis=1)
    boot_beta = np.linalg.solve(rows, boot_meds.T).T
    se = boot_beta.std(axis=0, ddof=1) if n_boot > 1 else np.full(k, np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = beta / se
    p = np.where(se == 0, np.where(beta == 0, 1.0, 0.0), 2.0 * stats.norm.sf(np.abs(z)))
    resid = y - (rows @ beta)[cell]
    return RegressionResult("median", list(terms or TERMS[:k]), beta, se, z, p,
                            float("nan"), n, residuals=resid,
                            notes=[f"bootstrap: {n_boot} within-cell resamples"])


def regress_records(records, response: str, model: str = "FGLS", **kw) -> RegressionResult:
    """Fit ``model`` to a list of metric records, skipping aborted/NaN rows."""
    keep = [r for r in records if not r.aborted and np.isfinite(getattr(r, response))]
    X = design_matrix([r.var for r in keep], [r.ssban for r in keep], [r.tt for r in keep])
    y = np.array([float(getattr(r, response)) for r in keep])
    fit = {"FGLS": fgls, "OLS": ols, "median": median_regression}[model]
    return fit(X, y, **kw)

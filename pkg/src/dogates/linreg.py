"""Weighted least squares with heteroskedasticity-robust inference.

The second-stage engine behind both group-effect projections. Solves the
weighted normal equations through a QR factorization of the sqrt-weighted
design, reports HC0 sandwich standard errors, and uses the normal
reference distribution for p-values and confidence intervals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy import stats

RANK_RTOL = 1e-10


@dataclass(frozen=True)
class WlsFit:
    coef: np.ndarray
    se: np.ndarray
    cov: np.ndarray
    p_values: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    n_used: int


def wls(design, response, weights, alpha: float = 0.05, column_names=None) -> WlsFit:
    """Weighted least squares fit with HC0 robust covariance.

    Parameters
    ----------
    design : array (n, q)
    response : array (n,)
    weights : array (n,)
        Nonnegative case weights; rows with weight 0 drop out of the fit.
    alpha : float
        Two-sided confidence level for the intervals, in (0, 1).
    column_names : sequence of str, optional
        Used in the rank-deficiency error message.

    Returns
    -------
    WlsFit
        coef minimizes sum_i w_i (r_i - x_i beta)^2; cov is the sandwich
        (X'WX)^-1 (sum w_i^2 u_i^2 x_i x_i') (X'WX)^-1.
    """
    x = np.asarray(design, dtype=np.float64)
    r = np.asarray(response, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("design must be a 2-d matrix")
    n, q = x.shape
    if r.shape != (n,) or w.shape != (n,):
        raise ValueError("design, response and weights disagree on n")
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must be in (0, 1)")
    if (w < 0).any() or not np.isfinite(w).all():
        raise ValueError("weights must be finite and nonnegative")
    if not (w > 0).any():
        raise ValueError("all weights are zero")
    if n <= q:
        raise ValueError(f"need n > q for inference, got n={n}, q={q}")

    sw = np.sqrt(w)
    qmat, rmat = np.linalg.qr(x * sw[:, None])
    rdiag = np.abs(np.diag(rmat))
    tol = RANK_RTOL * rdiag.max()
    low = np.flatnonzero(rdiag <= tol)
    if low.size:
        if column_names is not None:
            names = ", ".join(str(column_names[j]) for j in low)
        else:
            names = ", ".join(f"column {j + 1}" for j in low)
        raise ValueError(f"design is rank deficient on the weighted support: {names}")

    coef = sla.solve_triangular(rmat, qmat.T @ (r * sw))
    resid = r - x @ coef

    rinv = sla.solve_triangular(rmat, np.eye(q))
    bread = rinv @ rinv.T  # (X'WX)^-1
    meat = (x * (w * w * resid * resid)[:, None]).T @ x
    cov = bread @ meat @ bread
    cov = 0.5 * (cov + cov.T)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))

    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, coef / np.where(se > 0, se, 1.0), np.inf * np.sign(coef))
    p = np.where(se > 0, 2.0 * stats.norm.sf(np.abs(z)), np.where(coef == 0.0, 1.0, 0.0))
    zc = stats.norm.ppf(1.0 - alpha / 2.0)
    return WlsFit(
        coef=coef,
        se=se,
        cov=cov,
        p_values=p,
        ci_low=coef - zc * se,
        ci_high=coef + zc * se,
        n_used=int((w > 0).sum()),
    )

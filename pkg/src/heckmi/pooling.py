"""Pooling of multiply-imputed fits and prediction intervals.

Coefficients pool by Rubin's rules: the point estimate is the average across
imputations, the total variance adds the within-imputation average and the
(1 + 1/m)-scaled between-imputation variance, and interval degrees of freedom
follow the Barnard-Rubin small-sample adjustment. Predictions combine the
same way at the row level; the per-row, per-imputation variance is the usual
linear-model predictive variance with the design inverse taken from the
originally observed rows. The sector-median baseline emits point predictions
only (no interval).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .data import Dataset, DesignMatrix, DesignSpec, encode_design
from .errors import DataError
from .impute import ImputationSet
from .selection import Heckman2StepFit, HeckmanMLFit, OlsFit, fit_ols
from .stats import quantile


@dataclass
class PooledParameters:
    theta_hat: np.ndarray
    W: np.ndarray
    B: np.ndarray
    total_var: np.ndarray
    df: np.ndarray
    m: int
    column_names: tuple = ()

    @property
    def se(self):
        return np.sqrt(self.total_var)

    def ci(self, alpha=0.05):
        half = quantile(1 - alpha / 2, df=self.df) * self.se
        return self.theta_hat - half, self.theta_hat + half


@dataclass
class PredictionWithInterval:
    row_id: int
    y_hat: float
    v_within: float
    v_between: float
    total_var: float
    lower: float
    upper: float
    df: float


def barnard_rubin_df(b, total, m, nu_com):
    """Small-sample degrees of freedom for Rubin pooling.

    ``b`` and ``total`` may be scalars or arrays; ``nu_com`` is the
    complete-data residual df. With zero between-variance the result is the
    observed-data limit nu_obs rather than infinity.
    """
    b = np.asarray(b, dtype=np.float64)
    total = np.asarray(total, dtype=np.float64)
    lam = np.where(total > 0, (1.0 + 1.0 / m) * b / np.where(total > 0, total, 1.0), 0.0)
    lam = np.clip(lam, 0.0, 1.0)
    nu_obs = (nu_com + 1.0) / (nu_com + 3.0) * nu_com * (1.0 - lam)
    # harmonic combination; lam=0 makes 1/nu_old vanish so df -> nu_obs
    inv_old = lam ** 2 / (m - 1.0)
    inv_obs = np.where(nu_obs > 0, 1.0 / np.where(nu_obs > 0, nu_obs, 1.0),
                       np.inf)
    df = 1.0 / (inv_old + inv_obs)
    # lambda -> 1 (all variance between imputations) drives df to 0; keep the
    # t quantile defined, if enormous
    return np.maximum(df, 1e-3)


def fit_per_imputation(imps: ImputationSet, spec: DesignSpec = None):
    """One full-sample OLS fit per completed dataset."""
    spec = spec if spec is not None else imps.spec
    fits = []
    for comp in imps.completed:
        x = encode_design(comp, spec.outcome_covariates)
        fits.append(fit_ols(comp.outcome, x))
    return fits


def pool_rubin(fits) -> PooledParameters:
    """Rubin's rules over per-imputation coefficient fits."""
    m = len(fits)
    if m < 2:
        raise DataError("pooling needs at least 2 imputations")
    names = fits[0].column_names
    k = fits[0].beta.shape[0]
    for f in fits[1:]:
        if f.beta.shape[0] != k or f.column_names != names:
            raise DataError("imputation fits have mismatched coefficient layouts")
    thetas = np.stack([f.beta for f in fits])
    variances = np.stack([np.diag(f.covariance) for f in fits])
    theta_hat = thetas.mean(axis=0)
    w = variances.mean(axis=0)
    b = thetas.var(axis=0, ddof=1)
    total = w + (1.0 + 1.0 / m) * b
    nu_com = fits[0].residual_df
    df = barnard_rubin_df(b, total, m, nu_com)
    return PooledParameters(theta_hat, w, b, total, df, m, names)


def _target_values(targets):
    if isinstance(targets, DesignMatrix):
        return targets.values, targets.row_ids
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    return t, np.arange(t.shape[0], dtype=np.int64)


def _observed_design_inverse(imps: ImputationSet, spec: DesignSpec):
    """(X_obs' X_obs)^-1 of the originally observed rows, via QR."""
    src = imps.source
    x_obs = encode_design(src, spec.outcome_covariates, rows=src.observed)
    _, rmat = sla.qr(x_obs.values, mode="economic")
    diag = np.abs(np.diag(rmat))
    if diag.min() <= diag.max() * max(x_obs.n, x_obs.k) * np.finfo(float).eps:
        raise DataError("observed-row design is rank deficient")
    rinv = sla.solve_triangular(rmat, np.eye(x_obs.k))
    return rinv @ rinv.T


def predict_combine(imps: ImputationSet, fits, targets,
                    spec: DesignSpec = None):
    """Pooled point predictions with intervals for the target rows.

    y_hat averages the per-imputation linear predictions; the within part of
    the variance is the average per-imputation predictive variance
    sigma_j^2 (1 + x (X_obs'X_obs)^{-1} x'), the between part is the sample
    variance of the per-imputation predictions, and the interval is a t
    interval at Barnard-Rubin df.
    """
    spec = spec if spec is not None else imps.spec
    m = len(fits)
    if m != imps.m:
        raise DataError("fits are not aligned with the imputation set")
    if m < 2:
        raise DataError("prediction pooling needs at least 2 imputations")
    tvals, row_ids = _target_values(targets)
    k = fits[0].beta.shape[0]
    if tvals.shape[1] != k:
        raise DataError(f"target columns ({tvals.shape[1]}) do not match "
                        f"coefficient layout ({k})")
    xtx_inv = _observed_design_inverse(imps, spec)
    quad = np.einsum("ij,jk,ik->i", tvals, xtx_inv, tvals)
    preds = np.stack([tvals @ f.beta for f in fits])           # (m, n_t)
    se2 = np.stack([f.sigma ** 2 * (1.0 + quad) for f in fits])
    y_hat = preds.mean(axis=0)
    v_within = se2.mean(axis=0)
    v_between = preds.var(axis=0, ddof=1)
    total = v_within + (1.0 + 1.0 / m) * v_between
    nu_com = fits[0].residual_df
    df = barnard_rubin_df(v_between, total, m, nu_com)
    half_all = quantile(0.975, df=df) * np.sqrt(total)
    out = []
    for i in range(tvals.shape[0]):
        half = half_all[i]
        out.append(PredictionWithInterval(
            row_id=int(row_ids[i]), y_hat=float(y_hat[i]),
            v_within=float(v_within[i]), v_between=float(v_between[i]),
            total_var=float(total[i]), lower=float(y_hat[i] - half),
            upper=float(y_hat[i] + half), df=float(df[i])))
    return out


def _fit_prediction_parts(fit):
    """(beta, sigma^2, Cov(beta)) for the fit types predict_single accepts."""
    if isinstance(fit, OlsFit):
        return fit.beta, fit.sigma ** 2, fit.covariance
    if isinstance(fit, HeckmanMLFit):
        p = fit.beta.shape[0]
        return fit.beta, fit.sigma_eps ** 2, fit.covariance[:p, :p]
    if isinstance(fit, Heckman2StepFit):
        p = fit.beta.shape[0]
        return fit.beta, fit.implied_sigma_eps ** 2, fit.covariance[:p, :p]
    raise DataError(f"cannot predict from fit of type {type(fit).__name__}")


def predict_single(fit, targets, df=None):
    """Predictions with t intervals from one fit (no pooling).

    The point prediction is the unconditional linear part x beta_hat even for
    selection-model fits. Variance = sigma^2 + x Cov(beta) x'. ``df`` defaults
    to the fit's residual df; pass the observed-row df explicitly when the
    fit was computed on a completed dataset.
    """
    beta, sigma2, cov = _fit_prediction_parts(fit)
    tvals, row_ids = _target_values(targets)
    if tvals.shape[1] != beta.shape[0]:
        raise DataError(f"target columns ({tvals.shape[1]}) do not match "
                        f"coefficient layout ({beta.shape[0]})")
    if df is None:
        df = getattr(fit, "residual_df", None)
    if df is None or df <= 0:
        raise DataError("prediction interval needs positive degrees of freedom")
    y_hat = tvals @ beta
    se2 = sigma2 + np.einsum("ij,jk,ik->i", tvals, cov, tvals)
    tq = quantile(0.975, df=float(df))
    out = []
    for i in range(tvals.shape[0]):
        half = tq * np.sqrt(max(se2[i], 0.0))
        out.append(PredictionWithInterval(
            row_id=int(row_ids[i]), y_hat=float(y_hat[i]),
            v_within=float(se2[i]), v_between=0.0, total_var=float(se2[i]),
            lower=float(y_hat[i] - half), upper=float(y_hat[i] + half),
            df=float(df)))
    return out


def predict_median_baseline(ds: Dataset, group_key: str):
    """Group-median point predictions for the missing rows; no interval."""
    groups = ds.column(group_key)
    obs = ds.observed
    medians = {}
    out = []
    for i in np.nonzero(~obs)[0]:
        g = groups[i]
        if g not in medians:
            vals = ds.outcome[obs & (groups == g)]
            if vals.size == 0:
                raise DataError(f"group {g!r} of {group_key!r} has no observed "
                                "outcomes (common support violated)")
            medians[g] = float(np.median(vals))
        y = medians[g]
        out.append(PredictionWithInterval(
            row_id=int(ds.row_ids[i]), y_hat=y, v_within=np.nan,
            v_between=np.nan, total_var=np.nan, lower=np.nan, upper=np.nan,
            df=np.nan))
    return out

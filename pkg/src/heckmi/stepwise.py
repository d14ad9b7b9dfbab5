"""Both-direction stepwise covariate selection by AIC, plus Wald pruning.

Works for either equation of the selection model: ``model="linear"`` selects
outcome covariates (Gaussian log-likelihood on the observed rows) and
``model="probit"`` selects covariates for the observedness indicator over all
rows. Categorical covariates enter and leave as whole one-hot blocks, and AIC
counts every estimated coefficient column.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np
import scipy.stats as sps

from .data import Dataset, DesignSpec, encode_design
from .errors import ConvergenceError, DataError, NumericError
from .selection import fit_ols, fit_probit

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class Step:
    action: str
    covariate: str
    aic_before: float
    aic_after: float


@dataclass
class StepTrace:
    steps: list
    final_spec: tuple
    final_aic: float
    model: str


def _resolve_scope(ds: Dataset, model: str, scope):
    if scope is None:
        if model == "linear":
            return np.nonzero(ds.observed)[0]
        return np.arange(ds.n)
    scope = np.asarray(scope)
    if scope.dtype == bool:
        scope = np.nonzero(scope)[0]
    return scope


def _response(ds: Dataset, model: str, scope):
    if model == "linear":
        y = ds.outcome[scope]
        if not np.all(np.isfinite(y)):
            raise DataError("outcome has missing values inside the fitting scope")
        return y
    return ds.observed[scope]


def _model_aic(ds: Dataset, covariates, model: str, scope, response):
    x = encode_design(ds, tuple(covariates), rows=scope)
    if model == "linear":
        fit = fit_ols(response, x)
        n = response.shape[0]
        sigma2 = fit.rss / n
        if sigma2 <= 0.0:
            return -np.inf
        loglik = -0.5 * n * (_LOG_2PI + np.log(sigma2) + 1.0)
    else:
        fit = fit_probit(response, x)
        loglik = fit.loglik
    return -2.0 * loglik + 2.0 * x.k


def stepwise_aic(ds: Dataset, candidates, model: str, scope=None,
                 start=()) -> StepTrace:
    """Greedy both-direction AIC search over covariate blocks.

    Starts from ``start`` (default intercept-only) and at each step applies
    the single add or remove with the largest strict AIC decrease, until no
    move improves. Ties break on the lexicographically first covariate name.
    Candidate moves whose fit fails (collinearity, separation, ...) are
    skipped; a failure of the starting model propagates.
    """
    if model not in ("linear", "probit"):
        raise DataError(f"unknown model kind {model!r}")
    candidates = tuple(candidates)
    if len(candidates) == 0:
        raise DataError("stepwise needs a nonempty candidate list")
    scope = _resolve_scope(ds, model, scope)
    response = _response(ds, model, scope)
    current = sorted(set(start))
    aic_cur = _model_aic(ds, current, model, scope, response)
    names_all = sorted(set(candidates) | set(current))
    steps = []
    while True:
        best = None
        for name in names_all:
            if name in current:
                action, trial = "remove", [c for c in current if c != name]
            else:
                action, trial = "add", sorted(current + [name])
            try:
                aic_new = _model_aic(ds, trial, model, scope, response)
            except (DataError, NumericError, ConvergenceError):
                continue
            if aic_new < aic_cur and (best is None or aic_new < best[0]):
                best = (aic_new, action, name, trial)
        if best is None:
            break
        aic_new, action, name, trial = best
        steps.append(Step(action, name, aic_cur, aic_new))
        current, aic_cur = trial, aic_new
    return StepTrace(steps, tuple(current), aic_cur, model)


def _block_columns(column_names, covariate):
    prefix = covariate + "["
    return [j for j, cn in enumerate(column_names)
            if cn == covariate or cn.startswith(prefix)]


def _wald_p(beta, cov, idx):
    b = beta[idx]
    v = cov[np.ix_(idx, idx)]
    try:
        stat = float(b @ np.linalg.solve(v, b))
    except np.linalg.LinAlgError as exc:
        raise NumericError("singular covariance block in Wald test") from exc
    return float(sps.chi2.sf(stat, len(idx)))


def prune_insignificant(ds: Dataset, spec: DesignSpec, model: str,
                        alpha: float = 0.05) -> DesignSpec:
    """Drop covariate blocks that fail a Wald test at level alpha.

    Repeatedly refits and removes the block with the largest p-value above
    alpha (joint chi-square test over a categorical's columns) until every
    remaining block is significant. Returns a new DesignSpec with the chosen
    equation's covariates replaced; the intercept is never dropped.
    """
    if model not in ("linear", "probit"):
        raise DataError(f"unknown model kind {model!r}")
    if not 0.0 < alpha <= 1.0:
        raise DataError(f"alpha must be in (0, 1], got {alpha}")
    covs = list(spec.outcome_covariates if model == "linear"
                else spec.selection_covariates)
    scope = _resolve_scope(ds, model, None)
    response = _response(ds, model, scope)
    while covs:
        x = encode_design(ds, tuple(covs), rows=scope)
        if model == "linear":
            fit = fit_ols(response, x)
            beta, cov = fit.beta, fit.covariance
        else:
            fit = fit_probit(response, x)
            beta, cov = fit.beta_s, fit.covariance
        worst_name, worst_p = None, -np.inf
        for name in sorted(covs):
            idx = _block_columns(x.column_names, name)
            p = _wald_p(beta, cov, idx)
            if p > worst_p:
                worst_name, worst_p = name, p
        if worst_p > alpha:
            covs.remove(worst_name)
            continue
        break
    covs = tuple(covs)
    if model == "linear":
        return dataclasses.replace(spec, outcome_covariates=covs)
    return dataclasses.replace(spec, selection_covariates=covs)

"""Probit, OLS, and Heckman selection-model estimators.

The selection model couples a probit equation R' = Xs beta_s + eps_s with an
outcome equation Y = X beta + eps, where (eps_s, eps) are bivariate normal
with Var(eps_s)=1, Var(eps)=sigma_eps^2 and Cov = rho*sigma_eps. Y is seen
only when R' >= 0. Two estimators are provided: the classic two-step
(probit, then OLS on [X, lambda_hat] with a heteroskedasticity-consistent
sandwich covariance that propagates first-stage uncertainty) and full ML on
the transformed scale (beta, beta_s, log sigma, atanh rho) with analytic
gradients, quasi-Newton search and a Newton polish on the observed
information.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy import optimize

from . import kernels
from .data import Dataset, DesignMatrix, DesignSpec, encode_design
from .errors import ConvergenceError, DataError, NumericError
from .stats import inverse_mills, quantile

MAX_ABS_COEF = 1e3  # probit separation guard


def _values(x):
    return x.values if isinstance(x, DesignMatrix) else np.asarray(x, dtype=np.float64)


def _names(x, k):
    if isinstance(x, DesignMatrix):
        return x.column_names
    return tuple(f"x{i}" for i in range(k))


@dataclass
class ProbitFit:
    beta_s: np.ndarray
    covariance: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    column_names: tuple = ()

    @property
    def se(self):
        return np.sqrt(np.diag(self.covariance))


def fit_probit(r, xs, max_iter=100, tol=1e-8):
    """Newton maximization of the probit log-likelihood.

    Covariance is the inverse observed information at the optimum. Divergent
    coefficients (quasi-complete separation) and running out of iterations
    are errors, not silent flags.
    """
    x = _values(xs)
    r = np.asarray(r, dtype=bool)
    n, q = x.shape
    if r.all() or not r.any():
        raise DataError("probit response needs both classes present")
    beta = np.zeros(q)
    if np.all(x[:, 0] == 1.0):
        beta[0] = quantile(float(np.clip(r.mean(), 1e-10, 1 - 1e-10)))
    nll, grad, hess = kernels.probit_nll_grad_hess(beta, x, r)
    for it in range(max_iter + 1):
        if np.linalg.norm(grad) <= tol * (1.0 + abs(nll)):
            if nll < 1e-2:
                # essentially perfect classification: only separation gets here
                raise DataError(
                    "probit classes are (quasi-)separated: log-likelihood ~ 0")
            try:
                cov = sla.cho_solve(sla.cho_factor(hess), np.eye(q))
            except sla.LinAlgError:
                raise NumericError("probit information matrix is singular") from None
            return ProbitFit(beta, 0.5 * (cov + cov.T), -nll, it, True,
                             _names(xs, q))
        try:
            step = sla.cho_solve(sla.cho_factor(hess), -grad)
        except sla.LinAlgError:
            raise NumericError("probit information matrix is singular") from None
        scale = 1.0
        slack = 1e-12 * (1.0 + abs(nll))  # rounding floor of the loglik itself
        for _ in range(60):
            cand = beta + scale * step
            nll_new, grad_new, hess_new = kernels.probit_nll_grad_hess(cand, x, r)
            if np.isfinite(nll_new) and nll_new <= nll + slack:
                break
            scale *= 0.5
        else:
            raise ConvergenceError("probit line search failed to improve")
        beta, nll, grad, hess = cand, nll_new, grad_new, hess_new
        if np.max(np.abs(beta)) > MAX_ABS_COEF:
            raise DataError(
                "probit coefficients diverged (quasi-complete separation)")
    raise ConvergenceError(f"probit did not converge in {max_iter} iterations")


@dataclass
class OlsFit:
    beta: np.ndarray
    sigma: float
    covariance: np.ndarray
    residual_df: int
    column_names: tuple = ()
    rss: float = 0.0
    xtwx_inv: np.ndarray | None = None
    x: np.ndarray | None = field(default=None, repr=False)
    y: np.ndarray | None = field(default=None, repr=False)
    weights: np.ndarray | None = field(default=None, repr=False)

    @property
    def se(self):
        return np.sqrt(np.diag(self.covariance))


def fit_ols(y, x, weights=None):
    """Least squares of y on x; optional per-row variance multipliers.

    ``weights[i]`` scales the residual variance of row i (Var e_i =
    sigma^2 * weights[i]), i.e. WLS with weight 1/weights[i]. sigma^2 =
    weighted RSS / (n - p) and covariance = sigma^2 (X'WX)^{-1}.
    """
    xv = _values(x)
    y = np.asarray(y, dtype=np.float64)
    n, p = xv.shape
    if y.shape[0] != n:
        raise DataError("response length does not match design rows")
    if n <= p:
        raise DataError(f"too few rows for OLS: n={n}, p={p}")
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        if np.any(w <= 0):
            raise NumericError("variance multipliers must be positive")
        scale = 1.0 / np.sqrt(w)
        xw = xv * scale[:, None]
        yw = y * scale
    else:
        w = None
        xw, yw = xv, y
    q, rmat = sla.qr(xw, mode="economic")
    diag = np.abs(np.diag(rmat))
    if diag.min() <= diag.max() * max(n, p) * np.finfo(float).eps:
        raise DataError("design matrix is numerically rank deficient")
    beta = sla.solve_triangular(rmat, q.T @ yw)
    resid = yw - xw @ beta
    rss = float(resid @ resid)
    df = n - p
    sigma2 = rss / df
    rinv = sla.solve_triangular(rmat, np.eye(p))
    xtwx_inv = rinv @ rinv.T
    return OlsFit(beta, float(np.sqrt(sigma2)), sigma2 * xtwx_inv, df,
                  _names(x, p), rss, xtwx_inv, xv, y, w)


@dataclass
class Heckman2StepFit:
    beta: np.ndarray
    beta_lambda: float
    sigma_eta: float
    probit: ProbitFit
    lambda_hat: np.ndarray
    delta_hat: np.ndarray
    covariance: np.ndarray
    implied_rho: float
    implied_sigma_eps: float
    column_names: tuple = ()

    @property
    def se(self):
        return np.sqrt(np.diag(self.covariance))


def heckman_two_step(ds: Dataset, spec: DesignSpec) -> Heckman2StepFit:
    """Heckman's two-step estimator.

    Step 1: probit of R on the selection design (all rows). Step 2: OLS of
    the observed outcomes on [X, lambda_hat]. The reported covariance for
    (beta, beta_lambda) is the standard sandwich accounting for the
    heteroskedastic step-2 errors (variance sigma^2 (1 - rho^2 delta_i)) and
    the sampling noise of the step-1 coefficients.
    """
    if not spec.has_exclusion_restriction:
        raise DataError("two-step estimator requires an exclusion restriction "
                        "(selection covariates must differ from outcome covariates)")
    obs = ds.observed
    xs_all = encode_design(ds, spec.selection_covariates)
    x_obs = encode_design(ds, spec.outcome_covariates, rows=obs)
    p = x_obs.k
    if ds.n1 <= p + 1:
        raise DataError(f"too few observed rows: n1={ds.n1}, need > {p + 1}")
    probit = fit_probit(obs, xs_all)
    zs = xs_all.values[obs]
    a = zs @ probit.beta_s
    lam = inverse_mills(a, selected=True)
    delta = lam * (lam + a)
    w_mat = np.column_stack([x_obs.values, lam])
    try:
        step2 = fit_ols(ds.outcome[obs], w_mat)
    except DataError as err:
        raise DataError(
            "inverse-Mills column is collinear with the outcome design "
            f"(exclusion restriction fails in practice): {err}") from None
    beta = step2.beta[:p]
    beta_lambda = float(step2.beta[p])
    sigma2_eps = step2.rss / ds.n1 + float(np.mean(delta)) * beta_lambda ** 2
    sigma_eps = float(np.sqrt(sigma2_eps))
    rho = float(np.clip(beta_lambda / sigma_eps, -1.0, 1.0)) if sigma_eps > 0 else 0.0

    # sandwich: sigma^2 (W'W)^-1 [W'(I - rho^2 D)W + Q] (W'W)^-1 with
    # Q = rho^2 (W'D Z) V_probit (Z'D W), D = diag(delta)
    wtw_inv = step2.xtwx_inv
    wr = w_mat.T * (1.0 - rho * rho * delta)
    wdz = (w_mat.T * delta) @ zs
    qmat = rho * rho * (wdz @ probit.covariance @ wdz.T)
    cov = sigma2_eps * (wtw_inv @ (wr @ w_mat + qmat) @ wtw_inv)
    cov = 0.5 * (cov + cov.T)
    names = x_obs.column_names + ("lambda",)
    return Heckman2StepFit(beta, beta_lambda, step2.sigma, probit, lam, delta,
                           cov, rho, sigma_eps, names)


@dataclass
class HeckmanMLFit:
    beta: np.ndarray
    beta_s: np.ndarray
    sigma_eps: float
    rho: float
    covariance: np.ndarray  # on the (beta, beta_s, log sigma, atanh rho) scale
    loglik: float
    converged: bool
    params: np.ndarray = field(default=None, repr=False)
    column_names: tuple = ()
    selection_column_names: tuple = ()

    @property
    def n_params(self):
        return self.params.shape[0]

    def unpack(self, params):
        """Split a transformed parameter vector into (beta, beta_s, sigma, rho)."""
        p = self.beta.shape[0]
        q = self.beta_s.shape[0]
        return (params[:p], params[p:p + q],
                float(np.exp(params[p + q])), float(np.tanh(params[p + q + 1])))

    @property
    def se_beta(self):
        p = self.beta.shape[0]
        return np.sqrt(np.diag(self.covariance)[:p])

    @property
    def se_sigma_eps(self):
        # delta method through sigma = exp(tau)
        return self.sigma_eps * float(np.sqrt(self.covariance[-2, -2]))

    @property
    def se_rho(self):
        # delta method through rho = tanh(w)
        return (1.0 - self.rho ** 2) * float(np.sqrt(self.covariance[-1, -1]))


class _HeckmanProblem:
    """Pre-encoded designs for one (dataset, spec) pair."""

    def __init__(self, ds: Dataset, spec: DesignSpec):
        obs = ds.observed
        if ds.n1 == 0 or ds.n0 == 0:
            raise DataError("selection model needs both observed and missing rows")
        xs_all = encode_design(ds, spec.selection_covariates)
        self.x_obs = encode_design(ds, spec.outcome_covariates, rows=obs)
        self.xs_obs = xs_all.values[obs]
        self.xs_mis = xs_all.values[~obs]
        self.y_obs = ds.outcome[obs]
        self.p = self.x_obs.k
        self.q = xs_all.k
        self.column_names = self.x_obs.column_names
        self.selection_column_names = xs_all.column_names
        if ds.n1 <= self.p:
            raise DataError(f"too few observed rows: n1={ds.n1}, need > {self.p}")

    def nll_grad(self, params):
        return kernels.heckman_nll_grad(params, self.y_obs, self.x_obs.values,
                                        self.xs_obs, self.xs_mis)

    def hessian(self, params, h=1e-5):
        """Observed information by central differences of the analytic gradient."""
        d = params.shape[0]
        hess = np.empty((d, d))
        for i in range(d):
            hi = h * max(1.0, abs(params[i]))
            up = params.copy()
            dn = params.copy()
            up[i] += hi
            dn[i] -= hi
            _, gu = self.nll_grad(up)
            _, gd = self.nll_grad(dn)
            hess[:, i] = (gu - gd) / (2 * hi)
        return 0.5 * (hess + hess.T)


def heckman_loglik_grad(params, ds: Dataset, spec: DesignSpec):
    """Log-likelihood and analytic gradient on the transformed scale."""
    problem = _HeckmanProblem(ds, spec)
    params = np.asarray(params, dtype=np.float64)
    nll, grad = problem.nll_grad(params)
    return -nll, -grad


def _ml_start(ds, spec, problem):
    if spec.has_exclusion_restriction:
        try:
            ts = heckman_two_step(ds, spec)
            sigma0 = max(ts.implied_sigma_eps, 1e-3)
            rho0 = float(np.clip(ts.implied_rho, -0.95, 0.95))
            return np.concatenate([ts.beta, ts.probit.beta_s,
                                   [np.log(sigma0)], [np.arctanh(rho0)]])
        except (DataError, NumericError):
            pass
    else:
        warnings.warn("no exclusion restriction: selection and outcome covariates "
                      "coincide; ML is identified only through functional form",
                      stacklevel=3)
    xs_stacked = np.vstack([problem.xs_obs, problem.xs_mis])
    r_stacked = np.concatenate([np.ones(problem.xs_obs.shape[0], dtype=bool),
                                np.zeros(problem.xs_mis.shape[0], dtype=bool)])
    probit = fit_probit(r_stacked, xs_stacked)
    ols = fit_ols(problem.y_obs, problem.x_obs)
    sigma0 = max(ols.sigma, 1e-3)
    return np.concatenate([ols.beta, probit.beta_s, [np.log(sigma0)], [0.0]])


def heckman_ml(ds: Dataset, spec: DesignSpec, init=None, max_iter=500,
               loglik_tol=1e-10, grad_tol=1e-8) -> HeckmanMLFit:
    """Full-information ML for the selection model.

    Quasi-Newton (BFGS) with the analytic gradient, then a Newton polish on
    the finite-difference observed information. ``converged`` reports whether
    the gradient criterion was met; a stalled search is not an error. The
    covariance is the inverse observed information on the transformed scale.
    """
    problem = _HeckmanProblem(ds, spec)
    params = np.asarray(init, dtype=np.float64) if init is not None \
        else _ml_start(ds, spec, problem)
    if params.shape[0] != problem.p + problem.q + 2:
        raise DataError("init has wrong length")
    nll0, _ = problem.nll_grad(params)
    if not np.isfinite(nll0):
        raise NumericError("likelihood is non-finite at the starting point")

    def fun(theta):
        nll, grad = problem.nll_grad(theta)
        if not np.isfinite(nll):
            return 1e300, np.zeros_like(grad)
        return nll, grad

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = optimize.minimize(fun, params, jac=True, method="BFGS",
                                options={"maxiter": max_iter, "gtol": 1e-10})
    params = res.x
    nll, grad = problem.nll_grad(params)

    # Newton polish: quadratic convergence near the optimum and we need the
    # observed information for the covariance anyway.
    hess = problem.hessian(params)
    for _ in range(25):
        if np.linalg.norm(grad) <= 0.01 * grad_tol * (1.0 + abs(nll)):
            break
        try:
            step = sla.cho_solve(sla.cho_factor(hess), -grad)
        except sla.LinAlgError:
            break
        scale, improved = 1.0, False
        for _ in range(40):
            cand = params + scale * step
            nll_new, grad_new = problem.nll_grad(cand)
            if np.isfinite(nll_new) and nll_new <= nll + loglik_tol * abs(nll):
                improved = nll_new < nll or np.linalg.norm(grad_new) < np.linalg.norm(grad)
                break
            scale *= 0.5
        if not improved:
            break
        params, nll, grad = cand, nll_new, grad_new
        hess = problem.hessian(params)

    converged = bool(np.linalg.norm(grad) <= grad_tol * (1.0 + abs(nll)))
    try:
        cov = sla.cho_solve(sla.cho_factor(hess), np.eye(params.shape[0]))
    except sla.LinAlgError:
        raise NumericError("information matrix is singular at the optimum") from None
    cov = 0.5 * (cov + cov.T)
    p, q = problem.p, problem.q
    fit = HeckmanMLFit(
        beta=params[:p],
        beta_s=params[p:p + q],
        sigma_eps=float(np.exp(params[p + q])),
        rho=float(np.tanh(params[p + q + 1])),
        covariance=cov,
        loglik=float(-nll),
        converged=converged,
        params=params,
        column_names=problem.column_names,
        selection_column_names=problem.selection_column_names,
    )
    return fit


def conditional_moments(fit, x, xs, selected=True):
    """Mean and variance of Y given the selection outcome.

    Selected rows: mean = X beta + rho sigma lambda(a), variance =
    sigma^2 (1 - rho^2 delta) with delta = lambda(lambda + a). Non-selected
    rows use the R=0 Mills ratio -phi/Phi(-a); its delta analogue is the same
    expression evaluated at the branch's own Mills value.
    ``fit`` is a HeckmanMLFit or a (beta, beta_s, sigma_eps, rho) tuple.
    """
    if isinstance(fit, HeckmanMLFit):
        beta, beta_s, sigma, rho = fit.beta, fit.beta_s, fit.sigma_eps, fit.rho
    else:
        beta, beta_s, sigma, rho = fit
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    a = xs @ beta_s
    m = inverse_mills(a, selected=selected)
    mean = x @ beta + rho * sigma * m
    delta = m * (m + a)
    var = sigma ** 2 * (1.0 - rho ** 2 * delta)
    return mean, var

"""Imputation methods for the missing outcome.

Single imputation: LM (deterministic linear prediction) and Hml (one draw
from the selection model's missing-branch conditional). Multiple imputation:
MIPmm (Bayesian linear model + predictive mean matching), MIRF (random
forest hot deck), MIHml (posterior draws around the ML selection fit) and
MIH2Step (probit draws + heteroskedastic weighted linear draws). Hot-deck
methods only ever copy observed outcome values. All randomness flows through
per-imputation child streams, so a given (data, spec, config, seed) yields a
bit-identical result regardless of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import Dataset, DesignSpec, encode_design
from .errors import ConfigError, DataError, NumericError
from .selection import (HeckmanMLFit, OlsFit, conditional_moments, fit_ols,
                        fit_probit, heckman_ml, heckman_two_step)
from .stats import RngStream, inverse_mills, mvn_draw

METHODS = ("Median", "LM", "Hml", "MIPmm", "MIRF", "MIHml", "MIH2Step")
SINGLE_IMPUTATION = ("LM", "Hml")


@dataclass
class MethodConfig:
    method: str
    m: int = 5
    donors: int = 5
    trees: int = 10
    min_leaf: int = 5
    rng: RngStream = field(default_factory=lambda: RngStream(0))

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; "
                              f"choose from {', '.join(METHODS)}")
        if self.method in SINGLE_IMPUTATION:
            self.m = 1
        if self.m < 1:
            raise ConfigError("imputation count m must be >= 1")
        if self.donors < 1:
            raise ConfigError("donor pool size must be >= 1")
        if self.trees < 1:
            raise ConfigError("forest size must be >= 1")
        if self.min_leaf < 1:
            raise ConfigError("min_leaf must be >= 1")


@dataclass
class ImputationSet:
    completed: list
    draws: list
    method: MethodConfig
    source_fit: object = None
    source: Dataset = None
    spec: DesignSpec = None

    @property
    def m(self):
        return len(self.completed)


def _designs(ds, spec):
    """Outcome design split into observed/missing blocks plus selection design."""
    obs = ds.observed
    x_all = encode_design(ds, spec.outcome_covariates)
    x_obs = x_all.values[obs]
    x_mis = x_all.values[~obs]
    return obs, x_all, x_obs, x_mis


def _fill(ds, imputed):
    y = ds.outcome.copy()
    y[~ds.observed] = imputed
    return ds.with_outcome(y)


def impute_lm_single(ds: Dataset, spec: DesignSpec, rng=None) -> ImputationSet:
    """Deterministic linear-model imputation: missing Y_i <- X_i beta_hat."""
    obs, x_all, x_obs, x_mis = _designs(ds, spec)
    fit = fit_ols(ds.outcome[obs], x_obs)
    cfg = MethodConfig("LM", rng=rng if isinstance(rng, RngStream) else RngStream(0))
    completed = [_fill(ds, x_mis @ fit.beta)]
    return ImputationSet(completed, [{"beta": fit.beta}], cfg, fit, ds, spec)


def impute_heckman_single(ds: Dataset, spec: DesignSpec, rng=None) -> ImputationSet:
    """One stochastic draw from the ML selection fit's missing-row conditional."""
    stream = rng if isinstance(rng, RngStream) else RngStream(0)
    obs, x_all, x_obs, x_mis = _designs(ds, spec)
    xs_all = encode_design(ds, spec.selection_covariates)
    xs_mis = xs_all.values[~obs]
    fit = heckman_ml(ds, spec)
    mean, var = conditional_moments(fit, x_mis, xs_mis, selected=False)
    gen = stream.child(0).generator()
    imputed = mean + np.sqrt(var) * gen.standard_normal(mean.shape[0])
    cfg = MethodConfig("Hml", rng=stream)
    return ImputationSet([_fill(ds, imputed)], [{"theta": fit.params}],
                         cfg, fit, ds, spec)


def posterior_draw_linear(fit: OlsFit, rng, weights=None):
    """Draw (beta*, sigma*) from the normal-inverse-chi-square posterior.

    sigma*^2 = RSS / chi2(residual_df); beta* ~ N(beta_hat, sigma*^2 (X'WX)^-1)
    through the Cholesky factor of the (optionally weighted) design covariance.
    Passing ``weights`` refits the stored design with those per-row variance
    multipliers first. A degenerate exact fit returns (beta_hat, 0.0).
    """
    if fit.residual_df <= 0:
        raise DataError("posterior draw needs residual_df > 0")
    if weights is not None:
        if fit.x is None or fit.y is None:
            raise DataError("fit does not retain its design; cannot reweight")
        fit = fit_ols(fit.y, fit.x, weights=weights)
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    chi2 = gen.chisquare(fit.residual_df)
    if chi2 <= 0:
        raise NumericError("degenerate chi-square draw")
    sigma_star = float(np.sqrt(fit.rss / chi2))
    beta_star = mvn_draw(fit.beta, sigma_star ** 2 * fit.xtwx_inv, gen)
    return beta_star, sigma_star


def _pmm_assign(y_obs, donor_means, recip_means, k, u):
    """Match each recipient mean to one of its k nearest donor means.

    Ties in |distance| resolve to the lower donor position; ``u`` picks
    uniformly among the k candidates. Returns copied donor outcome values.
    """
    order = np.argsort(donor_means, kind="stable")
    donor_sorted = np.ascontiguousarray(donor_means[order])
    picks = kernels.pmm_take(donor_sorted, recip_means, k, u)
    return y_obs[order[picks]]


def impute_mi_pmm(ds: Dataset, spec: DesignSpec, cfg: MethodConfig) -> ImputationSet:
    """Predictive mean matching: donor means from beta_hat, recipient means
    from a fresh posterior draw each imputation (Type-1 matching)."""
    obs, x_all, x_obs, x_mis = _designs(ds, spec)
    if cfg.donors > ds.n1:
        raise DataError(f"donor pool {cfg.donors} exceeds observed rows {ds.n1}")
    fit = fit_ols(ds.outcome[obs], x_obs)
    y_obs = ds.outcome[obs]
    donor_means = x_obs @ fit.beta
    completed, draws = [], []
    for j in range(cfg.m):
        gen = cfg.rng.child(j).generator()
        beta_star, sigma_star = posterior_draw_linear(fit, gen)
        recip_means = x_mis @ beta_star
        u = gen.uniform(0.0, 1.0, x_mis.shape[0])
        imputed = _pmm_assign(y_obs, donor_means, recip_means, cfg.donors, u)
        completed.append(_fill(ds, imputed))
        draws.append({"beta": beta_star, "sigma": sigma_star})
    return ImputationSet(completed, draws, cfg, fit, ds, spec)


def _forest_draw(x_obs_feat, y_obs, x_mis_feat, trees, min_leaf, gen):
    """Grow a bootstrap forest and hot-deck one donor per missing row.

    Each split considers a random subset of max(1, p // 3) features, the
    usual regression-forest default. Donor pool for a row is the
    concatenation of the training members of the leaves it lands in across
    all trees (members counted with bootstrap multiplicity); the draw is
    uniform over that pool.
    """
    n1 = x_obs_feat.shape[0]
    n0 = x_mis_feat.shape[0]
    p_feat = x_obs_feat.shape[1]
    mtry = max(1, p_feat // 3)
    cap = 2 * (n1 // max(min_leaf, 1)) + 3
    sizes = np.empty((n0, trees), dtype=np.int64)
    leaf_start = np.empty((n0, trees), dtype=np.int64)
    forest = []
    for t in range(trees):
        idx = gen.integers(0, n1, n1)
        xb = np.ascontiguousarray(x_obs_feat[idx])
        yb = np.ascontiguousarray(y_obs[idx])
        if mtry < p_feat:
            sub_u = gen.random(cap * mtry)
        else:
            sub_u = np.empty(0, dtype=np.float64)
        feature, threshold, left, right, start, end, perm = \
            kernels.cart_build(xb, yb, min_leaf, mtry, sub_u)
        leaves = kernels.cart_leaf(x_mis_feat, feature, threshold, left, right)
        sizes[:, t] = end[leaves] - start[leaves]
        leaf_start[:, t] = start[leaves]
        forest.append((yb, perm))
    cum = np.cumsum(sizes, axis=1)
    total = cum[:, -1]
    assert np.all(total >= 1), "empty forest donor pool"
    target = np.minimum((gen.uniform(0.0, 1.0, n0) * total).astype(np.int64),
                        total - 1)
    tree_idx = (cum <= target[:, None]).sum(axis=1)
    prev = np.where(tree_idx > 0,
                    cum[np.arange(n0), np.maximum(tree_idx - 1, 0)], 0)
    offset = target - prev
    imputed = np.empty(n0, dtype=np.float64)
    for t in range(trees):
        rows = np.nonzero(tree_idx == t)[0]
        if rows.size == 0:
            continue
        yb, perm = forest[t]
        imputed[rows] = yb[perm[leaf_start[rows, t] + offset[rows]]]
    return imputed


def impute_mi_rf(ds: Dataset, spec: DesignSpec, cfg: MethodConfig) -> ImputationSet:
    """Random-forest hot deck over the outcome covariates."""
    obs, x_all, x_obs, x_mis = _designs(ds, spec)
    if ds.n1 < 2 * cfg.min_leaf:
        raise DataError(f"need at least {2 * cfg.min_leaf} observed rows, "
                        f"have {ds.n1}")
    # trees split on the encoded design minus the intercept column
    feat_obs = np.ascontiguousarray(x_obs[:, 1:])
    feat_mis = np.ascontiguousarray(x_mis[:, 1:])
    y_obs = ds.outcome[obs]
    completed, draws = [], []
    for j in range(cfg.m):
        gen = cfg.rng.child(j).generator()
        imputed = _forest_draw(feat_obs, y_obs, feat_mis, cfg.trees,
                               cfg.min_leaf, gen)
        completed.append(_fill(ds, imputed))
        draws.append({})
    return ImputationSet(completed, draws, cfg, None, ds, spec)


def impute_mi_heckman_ml(ds: Dataset, spec: DesignSpec,
                         cfg: MethodConfig) -> ImputationSet:
    """MI from the ML selection fit: parameter draws on the transformed scale,
    then missing-branch conditional draws per imputation."""
    obs, x_all, x_obs, x_mis = _designs(ds, spec)
    xs_all = encode_design(ds, spec.selection_covariates)
    xs_mis = xs_all.values[~obs]
    fit = heckman_ml(ds, spec)
    p, q = fit.beta.shape[0], fit.beta_s.shape[0]
    completed, draws = [], []
    for j in range(cfg.m):
        gen = cfg.rng.child(j).generator()
        for attempt in range(100):
            theta = mvn_draw(fit.params, fit.covariance, gen)
            beta, beta_s, sigma, rho = fit.unpack(theta)
            if np.isfinite(sigma) and np.isfinite(rho):
                break
        else:
            raise NumericError("100 posterior draws in a row back-transformed "
                               "to non-finite parameters")
        mean, var = conditional_moments((beta, beta_s, sigma, rho),
                                        x_mis, xs_mis, selected=False)
        imputed = mean + np.sqrt(var) * gen.standard_normal(mean.shape[0])
        completed.append(_fill(ds, imputed))
        draws.append({"theta": theta, "beta": beta, "sigma": sigma, "rho": rho})
    return ImputationSet(completed, draws, cfg, fit, ds, spec)


def impute_mi_heckman_2step(ds: Dataset, spec: DesignSpec,
                            cfg: MethodConfig) -> ImputationSet:
    """MI from the two-step fit.

    Per imputation: draw the probit coefficients, recompute the inverse-Mills
    column, redo the outcome step as weighted least squares with per-row
    variance multipliers 1 - rho_hat^2 delta*_i, draw (beta*, sigma*) from
    that weighted posterior, and impute missing rows with the missing-branch
    Mills correction plus heteroskedastic noise.
    """
    obs, x_all, x_obs, x_mis = _designs(ds, spec)
    xs_all = encode_design(ds, spec.selection_covariates)
    xs_obs = xs_all.values[obs]
    xs_mis = xs_all.values[~obs]
    fit = heckman_two_step(ds, spec)
    y_obs = ds.outcome[obs]
    rho2 = fit.implied_rho ** 2
    p = x_obs.shape[1]
    completed, draws = [], []
    for j in range(cfg.m):
        gen = cfg.rng.child(j).generator()
        beta_s_star = mvn_draw(fit.probit.beta_s, fit.probit.covariance, gen)
        a_obs = xs_obs @ beta_s_star
        lam_star = inverse_mills(a_obs, selected=True)
        delta_star = lam_star * (lam_star + a_obs)
        mult = np.maximum(1.0 - rho2 * delta_star, 1e-10)
        w_mat = np.column_stack([x_obs, lam_star])
        try:
            step2 = fit_ols(y_obs, w_mat, weights=mult)
        except DataError as err:
            raise DataError("drawn inverse-Mills column is collinear with the "
                            f"outcome design: {err}") from None
        beta_full, sigma_star = posterior_draw_linear(step2, gen)
        beta_star = beta_full[:p]
        beta_lambda_star = float(beta_full[p])
        rho_star = (float(np.clip(beta_lambda_star / sigma_star, -1.0, 1.0))
                    if sigma_star > 0 else 0.0)
        a_mis = xs_mis @ beta_s_star
        m0 = inverse_mills(a_mis, selected=False)
        mean = x_mis @ beta_star + beta_lambda_star * m0
        delta0 = m0 * (m0 + a_mis)
        var = np.maximum(sigma_star ** 2 * (1.0 - rho_star ** 2 * delta0), 0.0)
        imputed = mean + np.sqrt(var) * gen.standard_normal(mean.shape[0])
        completed.append(_fill(ds, imputed))
        draws.append({"beta_s": beta_s_star, "beta": beta_star,
                      "beta_lambda": beta_lambda_star, "sigma": sigma_star,
                      "rho": rho_star})
    return ImputationSet(completed, draws, cfg, fit, ds, spec)


def run_imputation(ds: Dataset, spec: DesignSpec, cfg: MethodConfig) -> ImputationSet:
    """Dispatch on cfg.method. Median has no imputation stage."""
    if cfg.method == "LM":
        return impute_lm_single(ds, spec, cfg.rng)
    if cfg.method == "Hml":
        return impute_heckman_single(ds, spec, cfg.rng)
    if cfg.method == "MIPmm":
        return impute_mi_pmm(ds, spec, cfg)
    if cfg.method == "MIRF":
        return impute_mi_rf(ds, spec, cfg)
    if cfg.method == "MIHml":
        return impute_mi_heckman_ml(ds, spec, cfg)
    if cfg.method == "MIH2Step":
        return impute_mi_heckman_2step(ds, spec, cfg)
    raise ConfigError(f"method {cfg.method!r} does not impute values")

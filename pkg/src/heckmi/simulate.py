"""Monte Carlo harness for comparing the imputation methods.

A study fixes one synthetic covariate table and one set of generating
parameters, then repeatedly draws outcomes and missingness, runs every
configured method on the incomplete data, and scores coefficient estimates
and missing-row predictions against the generating truth.

Missingness mechanisms:

* ``MAR`` / ``LightMNAR`` / ``HeavyMNAR``: a latent selection shock eps_s
  drives the response indicator through the generating selection index, and
  the outcome error is built as eps = sigma*(rho*eps_s + sqrt(1-rho^2)*z).
  rho = 0 / -0.3 / -0.6 by default. Because eps_s is drawn before z, the
  response pattern of a replication is identical across rho values.
* ``NonHeckman``: outcome errors are independent of selection; the response
  probability is Phi(c + slope * (sector mean outcome - outcome)), so firms
  well above their sector average tend not to report. No latent-index model
  holds.

Generating coefficients are calibrated once per study: a selection-model ML
fit on a seed dataset supplies (beta_hat, se_hat, beta_s_hat); the outcome
truth beta_star is a single N(beta_hat, se_hat^2) draw and the selection
coefficients are kept as fitted so every mechanism produces a comparable
missingness level.

Replications are independent Philox streams keyed by (study seed,
replication id), so results are bit-identical no matter how many worker
processes execute the study.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .data import Dataset, DesignSpec, Variable, VariableSchema, encode_design
from .errors import ConfigError, ConvergenceError, DataError, NumericError
from .impute import METHODS, MethodConfig, run_imputation
from .pooling import (_observed_design_inverse, fit_per_imputation,
                      pool_rubin, predict_combine, predict_median_baseline,
                      predict_single)
from .selection import heckman_ml
from .stats import RngStream, quantile

MECHANISMS = ("MAR", "LightMNAR", "HeavyMNAR", "NonHeckman")

DEFAULT_RHO = {"MAR": 0.0, "LightMNAR": -0.3, "HeavyMNAR": -0.6,
               "NonHeckman": 0.0}

# Generating coefficients for the default seed dataset, calibrated together
# with default_profile(). Revenue carries the unit slope of interest; the
# correlated size proxies add smaller loadings; region effects spread the
# outcome level across R1..R20. Selection loads on the same size proxies and
# (negatively aligned) region effects, so heavier-emitting regions report
# less, with the size marker as the exclusion-restriction instrument and an
# intercept placing the observed share near 40%.
DEFAULT_OUTCOME_COEFS = {
    "intercept": 1.0, "LogRevenue": 1.0, "LogAssets": 0.25,
    "LogEmployees": 0.2,
    "Region[R2]": -0.32, "Region[R3]": 0.8, "Region[R4]": 0.16,
    "Region[R5]": -0.48, "Region[R6]": 0.64, "Region[R7]": 0.0,
    "Region[R8]": -0.64, "Region[R9]": 0.48, "Region[R10]": -0.16,
    "Region[R11]": -0.8, "Region[R12]": 0.32, "Region[R13]": -0.32,
    "Region[R14]": 0.8, "Region[R15]": 0.16, "Region[R16]": -0.48,
    "Region[R17]": 0.64, "Region[R18]": 0.0, "Region[R19]": -0.64,
    "Region[R20]": 0.48,
}
DEFAULT_SELECTION_COEFS = {
    "intercept": -9.01, "LogRevenue": 0.24, "LogAssets": 0.16,
    "LogEmployees": 0.16,
    "Size[M]": -0.28, "Size[S]": -0.84, "Size[U]": -1.12,
    "Region[R2]": 0.12, "Region[R3]": -0.3, "Region[R4]": -0.06,
    "Region[R5]": 0.18, "Region[R6]": -0.24, "Region[R7]": 0.0,
    "Region[R8]": 0.24, "Region[R9]": -0.18, "Region[R10]": 0.06,
    "Region[R11]": 0.3, "Region[R12]": -0.12, "Region[R13]": 0.12,
    "Region[R14]": -0.3, "Region[R15]": -0.06, "Region[R16]": 0.18,
    "Region[R17]": -0.24, "Region[R18]": 0.0, "Region[R19]": 0.24,
    "Region[R20]": -0.18,
}


@dataclass(frozen=True)
class CovariateProfile:
    """Marginal distributions for the synthetic covariate table.

    categoricals holds (name, levels, weights) triples; weights=None means
    uniform. continuous holds (name, mean, sd, lower, upper) and samples a
    normal clipped to [lower, upper]. corr holds (name_a, name_b, r) pairs
    that correlate the latent normals of two continuous variables before
    scaling and clipping, applied in order (Gaussian copula on the pair).
    """

    categoricals: tuple
    continuous: tuple
    corr: tuple = ()

    def names(self):
        return tuple(c[0] for c in self.categoricals) + \
            tuple(c[0] for c in self.continuous)


def default_profile() -> CovariateProfile:
    """Firm-register-like covariates: a skewed sector classification,
    regions, activity codes, a size marker and three correlated size
    proxies. The revenue floor (lower clip well inside the distribution)
    mimics a register that only admits firms above a reporting threshold."""
    sector_levels = tuple(f"S{k:02d}" for k in range(1, 41))
    zipf = 1.0 / np.arange(1, 41, dtype=np.float64)
    sector_weights = tuple(zipf / zipf.sum())
    return CovariateProfile(
        categoricals=(
            ("Sector", sector_levels, sector_weights),
            ("Region", tuple(f"R{k}" for k in range(1, 21)), None),
            ("FirstActivity", ("F1", "F2", "F3", "F4"), None),
            ("Size", ("L", "M", "S", "U"), (0.205, 0.259, 0.318, 0.218)),
        ),
        continuous=(
            ("LogRevenue", 21.38, 2.5, 17.4, 26.97),
            ("LogAssets", 20.1, 2.2, 15.7, 25.4),
            ("LogEmployees", 5.9, 1.6, 2.7, 10.8),
        ),
        corr=(
            ("LogRevenue", "LogAssets", 0.85),
            ("LogRevenue", "LogEmployees", 0.80),
        ),
    )


def default_spec() -> DesignSpec:
    """Outcome on the three size proxies and region; selection adds the size
    marker as the exclusion restriction. Sector stays out of both equations
    and serves as the peer-group key for the median baseline."""
    return DesignSpec(
        outcome_covariates=("LogRevenue", "LogAssets", "LogEmployees",
                            "Region"),
        selection_covariates=("LogRevenue", "LogAssets", "LogEmployees",
                              "Region", "Size"))


def generate_covariates(n_rows, profile=None, rng=None) -> Dataset:
    """Draw one covariate table; the outcome column starts all-missing."""
    if n_rows < 2:
        raise ConfigError("n_rows must be >= 2")
    profile = profile if profile is not None else default_profile()
    if rng is None:
        rng = RngStream(0)
    gen = rng.generator() if isinstance(rng, RngStream) else rng

    variables = [Variable("Y", "continuous", role="outcome")]
    columns = {}
    for name, levels, weights in profile.categoricals:
        levels = tuple(levels)
        p = None if weights is None else np.asarray(weights, np.float64)
        if p is not None:
            if p.shape[0] != len(levels):
                raise ConfigError(f"profile weights for {name!r} do not "
                                  "match the level count")
            p = p / p.sum()
        variables.append(Variable(name, "categorical", levels=levels))
        idx = gen.choice(len(levels), size=n_rows, p=p)
        columns[name] = np.asarray(levels, dtype=object)[idx]
    latent = {}
    for name, mean, sd, lower, upper in profile.continuous:
        latent[name] = gen.standard_normal(n_rows)
    for name_a, name_b, r in profile.corr:
        if name_a not in latent or name_b not in latent:
            raise ConfigError(f"corr pair ({name_a!r}, {name_b!r}) names an "
                              "unknown continuous variable")
        if not -1.0 < r < 1.0:
            raise ConfigError("corr coefficient must lie in (-1, 1)")
        latent[name_b] = r * latent[name_a] \
            + np.sqrt(1.0 - r ** 2) * latent[name_b]
    for name, mean, sd, lower, upper in profile.continuous:
        variables.append(Variable(name, "continuous"))
        columns[name] = np.clip(mean + sd * latent[name], lower, upper)
    columns["Y"] = np.full(n_rows, np.nan)
    return Dataset(VariableSchema(variables), columns)


def coefficient_vector(column_names, coefs) -> np.ndarray:
    """Map a {design column name: value} dict onto the encoded layout.

    Unmentioned columns get 0; unknown names raise, catching typos like a
    reference-level coefficient that never makes it into the design.
    """
    lookup = {name: i for i, name in enumerate(column_names)}
    vec = np.zeros(len(column_names))
    for name, value in coefs.items():
        if name not in lookup:
            raise ConfigError(
                f"coefficient name {name!r} is not a design column; "
                f"available: {', '.join(column_names)}")
        vec[lookup[name]] = float(value)
    return vec


def build_seed_dataset(cov: Dataset, spec: DesignSpec, outcome_coefs,
                       selection_coefs, rho, sigma2_eps, rng) -> Dataset:
    """Synthesize the calibration dataset from explicit coefficients."""
    if not -1.0 < rho < 1.0:
        raise ConfigError("seed rho must lie in (-1, 1)")
    if sigma2_eps <= 0:
        raise ConfigError("sigma2_eps must be positive")
    x = encode_design(cov, spec.outcome_covariates)
    xs = encode_design(cov, spec.selection_covariates)
    beta = coefficient_vector(x.column_names, outcome_coefs)
    beta_s = coefficient_vector(xs.column_names, selection_coefs)
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    n = cov.n
    sigma = float(np.sqrt(sigma2_eps))
    eps_s = gen.standard_normal(n)
    eps = sigma * (rho * eps_s
                   + np.sqrt(1.0 - rho ** 2) * gen.standard_normal(n))
    y = x.values @ beta + eps
    r = xs.values @ beta_s + eps_s >= 0.0
    return cov.with_outcome(np.where(r, y, np.nan))


@dataclass
class TruthCalibration:
    """Generating parameters for one study.

    beta_star is a single draw from N(beta_hat, se_hat^2) of the seed fit;
    beta_s_hat is kept exactly as fitted so the missingness level matches
    the seed data. Column name tuples pin the design layout the truth was
    calibrated against.
    """

    beta_star: np.ndarray
    beta_s_hat: np.ndarray
    column_names: tuple
    selection_column_names: tuple
    source_fit: object = field(default=None, repr=False)


def calibrate_truth(seed_ds: Dataset, spec: DesignSpec,
                    rng=None) -> TruthCalibration:
    """Fit the selection model on the seed data and draw the outcome truth."""
    fit = heckman_ml(seed_ds, spec)
    if rng is None:
        rng = RngStream(0)
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    beta_star = fit.beta + fit.se_beta * gen.standard_normal(fit.beta.shape[0])
    return TruthCalibration(beta_star=beta_star,
                            beta_s_hat=fit.beta_s.copy(),
                            column_names=fit.column_names,
                            selection_column_names=fit.selection_column_names,
                            source_fit=fit)


@dataclass
class ScenarioConfig:
    """One cell of the study grid: mechanism x strength x methods."""

    mechanism: str
    spec: DesignSpec = None
    methods: tuple = None
    rho: float = None
    sigma2_eps: float = 1.0
    c: float = -0.5
    slope: float = 0.45
    replications: int = 100
    n_rows: int = 2000
    seed: int = 0
    sector_key: str = "Sector"
    deterministic_threshold: bool = False
    profile: CovariateProfile = None
    seed_outcome_coefs: dict = None
    seed_selection_coefs: dict = None
    seed_rho: float = -0.3

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"unknown mechanism {self.mechanism!r}; "
                              f"choose from {', '.join(MECHANISMS)}")
        if self.spec is None:
            self.spec = default_spec()
        if self.profile is None:
            self.profile = default_profile()
        if self.methods is None:
            self.methods = METHODS
        self.methods = tuple(
            mc if isinstance(mc, MethodConfig) else MethodConfig(mc)
            for mc in self.methods)
        if not self.methods:
            raise ConfigError("at least one method is required")
        names = [mc.method for mc in self.methods]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate method in scenario")
        if self.rho is None:
            self.rho = DEFAULT_RHO[self.mechanism]
        self.rho = float(self.rho)
        if not -1.0 < self.rho < 1.0:
            raise ConfigError("rho must lie in (-1, 1)")
        if self.mechanism == "MAR" and self.rho != 0.0:
            raise ConfigError("MAR means rho = 0; use LightMNAR/HeavyMNAR "
                              "for correlated selection")
        if not -1.0 < float(self.seed_rho) < 1.0:
            raise ConfigError("seed_rho must lie in (-1, 1)")
        if self.sigma2_eps <= 0:
            raise ConfigError("sigma2_eps must be positive")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.n_rows < 2:
            raise ConfigError("n_rows must be >= 2")
        if self.seed_outcome_coefs is None:
            self.seed_outcome_coefs = dict(DEFAULT_OUTCOME_COEFS)
        if self.seed_selection_coefs is None:
            self.seed_selection_coefs = dict(DEFAULT_SELECTION_COEFS)


def generate_replication(cov: Dataset, truth: TruthCalibration,
                         cfg: ScenarioConfig, rng):
    """Draw one (incomplete dataset, complete outcome) pair.

    For the latent-shock mechanisms the selection shock is drawn before the
    independent outcome component, so the response pattern of a replication
    does not move when rho changes.
    """
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    x = encode_design(cov, cfg.spec.outcome_covariates)
    if x.column_names != tuple(truth.column_names):
        raise DataError("covariate table does not match the calibrated "
                        "outcome design layout")
    n = cov.n
    sigma = float(np.sqrt(cfg.sigma2_eps))

    if cfg.mechanism == "NonHeckman":
        y = x.values @ truth.beta_star + sigma * gen.standard_normal(n)
        sector = cov.column(cfg.sector_key)
        _, inverse, counts = np.unique(sector, return_inverse=True,
                                       return_counts=True)
        sector_mean = np.bincount(inverse, weights=y) / counts
        delta = sector_mean[inverse] - y  # positive for under-performers
        p_obs = ndtr(cfg.c + cfg.slope * delta)
        r = gen.random(n) < p_obs
    else:
        xs = encode_design(cov, cfg.spec.selection_covariates)
        if xs.column_names != tuple(truth.selection_column_names):
            raise DataError("covariate table does not match the calibrated "
                            "selection design layout")
        eps_s = gen.standard_normal(n)
        eps = sigma * (cfg.rho * eps_s
                       + np.sqrt(1.0 - cfg.rho ** 2) * gen.standard_normal(n))
        y = x.values @ truth.beta_star + eps
        margin = xs.values @ truth.beta_s_hat
        if cfg.deterministic_threshold:
            r = ndtr(margin) >= 0.5
        else:
            r = margin + eps_s >= 0.0
    return cov.with_outcome(np.where(r, y, np.nan)), y


@dataclass
class ParamRecord:
    """Coefficient estimates of one method in one replication."""

    theta: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray


@dataclass
class PredRecord:
    """Missing-row predictions of one method in one replication."""

    row_ids: np.ndarray
    y_hat: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    truth: np.ndarray
    groups: np.ndarray = None


@dataclass
class ReplicationResult:
    replication_id: int
    missing_rate: float
    params: dict
    preds: dict
    failures: dict


def _pred_record(plist, y_complete, groups):
    rids = np.asarray([p.row_id for p in plist], dtype=np.int64)
    return PredRecord(
        row_ids=rids,
        y_hat=np.asarray([p.y_hat for p in plist]),
        lower=np.asarray([p.lower for p in plist]),
        upper=np.asarray([p.upper for p in plist]),
        truth=y_complete[rids],
        groups=None if groups is None else groups[rids],
    )


def apply_method(ds, spec, mc, rng, group_key):
    """One method on one incomplete dataset.

    Returns (coefficient record or None, prediction list, column names).
    The median baseline produces predictions only. Single-imputation
    methods report the completed-data analysis as a naive user would run
    it; their prediction interval uses the observed-row design information
    on n1 - p residual degrees of freedom. Multiple imputation pools
    coefficients by Rubin's rules and combines per-imputation predictions.
    """
    if mc.method == "Median":
        return None, predict_median_baseline(ds, group_key), ()

    targets = encode_design(ds, spec.outcome_covariates, rows=~ds.observed)
    imps = run_imputation(ds, spec, dataclasses.replace(mc, rng=rng))
    fits = fit_per_imputation(imps)
    if len(fits) == 1:
        fit = fits[0]
        tq = quantile(0.975, df=fit.residual_df)
        param = ParamRecord(theta=fit.beta.copy(), se=fit.se,
                            ci_lower=fit.beta - tq * fit.se,
                            ci_upper=fit.beta + tq * fit.se)
        quad_inv = _observed_design_inverse(imps, spec)
        pred_fit = dataclasses.replace(
            fit, covariance=fit.sigma ** 2 * quad_inv,
            residual_df=ds.n1 - fit.beta.shape[0])
        plist = predict_single(pred_fit, targets)
        names = fit.column_names
    else:
        pooled = pool_rubin(fits)
        lo, hi = pooled.ci(0.05)
        param = ParamRecord(theta=pooled.theta_hat, se=pooled.se,
                            ci_lower=lo, ci_upper=hi)
        plist = predict_combine(imps, fits, targets)
        names = pooled.column_names
    return param, plist, names


def _replicate(cfg: ScenarioConfig, cov: Dataset, truth: TruthCalibration,
               rep_id: int) -> ReplicationResult:
    ds, y_complete = generate_replication(
        cov, truth, cfg, RngStream(cfg.seed).child(rep_id))
    groups = ds.column(cfg.sector_key) if cfg.sector_key in ds.schema else None

    params, preds, failures = {}, {}, {}
    for idx, mc in enumerate(cfg.methods):
        rng = RngStream(cfg.seed).child(rep_id, 100 + idx)
        try:
            param, plist, _ = apply_method(ds, cfg.spec, mc, rng,
                                           cfg.sector_key)
        except (DataError, NumericError, ConvergenceError) as exc:
            failures[mc.method] = f"{type(exc).__name__}: {exc}"
            continue
        if param is not None:
            params[mc.method] = param
        preds[mc.method] = _pred_record(plist, y_complete, groups)
    return ReplicationResult(replication_id=rep_id,
                             missing_rate=ds.n0 / ds.n,
                             params=params, preds=preds, failures=failures)


_WORKER_CTX = None


def _init_worker(cfg, cov, truth):
    global _WORKER_CTX
    _WORKER_CTX = (cfg, cov, truth)


def _run_worker(rep_id):
    cfg, cov, truth = _WORKER_CTX
    return _replicate(cfg, cov, truth, rep_id)


@dataclass
class MetricsReport:
    """Aggregated study results.

    parameters: {method: {metric: per-coefficient array}} or None when no
    method reached two successful replications. predictions: {method:
    {metric: float or None}}. failures: {method: count}.
    """

    parameters: dict
    predictions: dict
    failures: dict
    column_names: tuple
    n_replications: int


def run_scenario(cfg: ScenarioConfig, truth=None, cov=None, workers=1):
    """Execute one scenario end to end.

    The covariate table and the truth calibration are built from the study
    seed unless passed in (sharing them across scenario cells keeps the
    comparison paired). Returns (results, MetricsReport) with results sorted
    by replication id.
    """
    if cov is None:
        cov = generate_covariates(cfg.n_rows, cfg.profile,
                                  RngStream(cfg.seed, 101))
    if truth is None:
        seed_cov = generate_covariates(cfg.n_rows, cfg.profile,
                                       RngStream(cfg.seed, 102))
        seed_ds = build_seed_dataset(seed_cov, cfg.spec,
                                     cfg.seed_outcome_coefs,
                                     cfg.seed_selection_coefs,
                                     cfg.seed_rho, cfg.sigma2_eps,
                                     RngStream(cfg.seed, 103))
        truth = calibrate_truth(seed_ds, cfg.spec, RngStream(cfg.seed, 104))

    rep_ids = range(cfg.replications)
    if workers <= 1 or cfg.replications == 1:
        results = [_replicate(cfg, cov, truth, i) for i in rep_ids]
    else:
        with ProcessPoolExecutor(max_workers=workers,
                                 initializer=_init_worker,
                                 initargs=(cfg, cov, truth)) as pool:
            results = list(pool.map(_run_worker, rep_ids))
    results.sort(key=lambda r: r.replication_id)

    try:
        parameters = evaluate_parameters(results, truth.beta_star)
    except DataError:
        parameters = None
    report = MetricsReport(parameters=parameters,
                           predictions=evaluate_predictions(results),
                           failures=count_failures(results),
                           column_names=tuple(truth.column_names),
                           n_replications=cfg.replications)
    return results, report


def count_failures(results):
    out = {}
    for res in results:
        for method in res.failures:
            out[method] = out.get(method, 0) + 1
    return out


def _method_order(results, attr):
    """Methods in first-seen order across replications."""
    order = []
    for res in results:
        for method in getattr(res, attr):
            if method not in order:
                order.append(method)
    return order


def evaluate_parameters(results, theta_true, min_reps=2):
    """Coefficient metrics per method over the successful replications.

    Per coefficient: Mean, Rbias% = mean(theta_hat - theta)/theta * 100,
    RMSE with an N-1 divisor, SE_e (empirical SD of the estimates, ddof 1),
    SE_m = sqrt(mean estimated variance), RE_SE% = (SE_m/SE_e - 1)*100 and
    CR% coverage of the 95% intervals. Coefficients with theta = 0 report
    plain bias (flagged in ``absolute_bias``) since relative bias is
    undefined there. Methods with fewer than ``min_reps`` successes are
    dropped (their failure counts stay visible in the report).
    """
    theta_true = np.asarray(theta_true, dtype=np.float64)
    out = {}
    for method in _method_order(results, "params"):
        recs = [r.params[method] for r in results if method in r.params]
        n = len(recs)
        if n < min_reps:
            continue
        thetas = np.stack([rc.theta for rc in recs])
        if thetas.shape[1] != theta_true.shape[0]:
            raise DataError(f"method {method!r} estimates "
                            f"{thetas.shape[1]} coefficients but the truth "
                            f"has {theta_true.shape[0]}")
        ses = np.stack([rc.se for rc in recs])
        lower = np.stack([rc.ci_lower for rc in recs])
        upper = np.stack([rc.ci_upper for rc in recs])

        mean = thetas.mean(axis=0)
        zero = theta_true == 0.0
        denom = np.where(zero, 1.0, theta_true)
        rbias = np.where(zero, mean - theta_true,
                         (mean - theta_true) / denom * 100.0)
        rmse = np.sqrt(((thetas - theta_true) ** 2).sum(axis=0) / (n - 1))
        se_e = thetas.std(axis=0, ddof=1)
        se_m = np.sqrt((ses ** 2).mean(axis=0))
        re_se = np.where(se_e > 0, (se_m / np.where(se_e > 0, se_e, 1.0)
                                    - 1.0) * 100.0, np.nan)
        cover = (lower <= theta_true) & (theta_true <= upper)
        cr = cover.mean(axis=0) * 100.0
        out[method] = {"n_used": n, "mean": mean, "rbias": rbias,
                       "rmse": rmse, "se_e": se_e, "se_m": se_m,
                       "re_se": re_se, "cr": cr, "absolute_bias": zero}
    if not out:
        raise DataError("no method reached the minimum number of "
                        "successful replications")
    return out


def evaluate_predictions(results, group_by=False):
    """Prediction metrics per method over the successful replications.

    RE% averages the per-replication mean of |y_hat - y| / y * 100 (rows
    with y = 0 are excluded from RE and counted in ``zero_excluded``).
    RMSE is sqrt of the N-1 weighted average of per-replication mean
    squared errors (all rows). CR% and PI length average per-replication
    means of interval hits and widths; methods without intervals report
    None there. With ``group_by`` a per-group breakdown of the same
    metrics is added under ``groups``.
    """
    out = {}
    for method in _method_order(results, "preds"):
        recs = [r.preds[method] for r in results if method in r.preds]
        stats = _pred_metrics(recs)
        if group_by:
            labels = sorted({g for rc in recs if rc.groups is not None
                             for g in np.unique(rc.groups)})
            per_group = {}
            for lab in labels:
                sub = []
                for rc in recs:
                    if rc.groups is None:
                        continue
                    pick = rc.groups == lab
                    if not pick.any():
                        continue
                    sub.append(PredRecord(
                        row_ids=rc.row_ids[pick], y_hat=rc.y_hat[pick],
                        lower=rc.lower[pick], upper=rc.upper[pick],
                        truth=rc.truth[pick]))
                if sub:
                    per_group[lab] = _pred_metrics(sub)
            stats["groups"] = per_group
        out[method] = stats
    return out


def _pred_metrics(recs):
    n = len(recs)
    re_terms, mse_terms, cr_terms, pi_terms = [], [], [], []
    zero_excluded = 0
    for rc in recs:
        if rc.row_ids.size == 0:
            continue
        err = rc.y_hat - rc.truth
        nonzero = rc.truth != 0.0
        zero_excluded += int(np.sum(~nonzero))
        if nonzero.any():
            re_terms.append(float(np.mean(
                np.abs(err[nonzero] / rc.truth[nonzero])) * 100.0))
        mse_terms.append(float(np.mean(err ** 2)))
        if np.isfinite(rc.lower).all():
            hit = (rc.lower <= rc.truth) & (rc.truth <= rc.upper)
            cr_terms.append(float(hit.mean() * 100.0))
            pi_terms.append(float(np.mean(rc.upper - rc.lower)))
    # one replication still yields a report; the spread divisor floors at 1
    rmse = float(np.sqrt(np.sum(mse_terms) / max(n - 1, 1)))
    return {
        "n_used": n,
        "re": float(np.mean(re_terms)) if re_terms else np.nan,
        "rmse": rmse,
        "cr": float(np.mean(cr_terms)) if cr_terms else None,
        "pi": float(np.mean(pi_terms)) if pi_terms else None,
        "zero_excluded": zero_excluded,
    }

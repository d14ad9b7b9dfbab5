"""Distribution functions, inverse Mills ratios, seeded RNG streams, MVN draws.

Thin scalar/array wrappers over the selected kernel backend plus the few
pieces of randomness plumbing every estimator shares.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _sps

from . import kernels
from .errors import NumericError

__all__ = [
    "std_normal", "norm_pdf", "norm_cdf", "quantile", "inverse_mills",
    "mvn_draw", "RngStream",
]


def _as_array(x):
    arr = np.asarray(x, dtype=np.float64)
    return np.atleast_1d(arr), arr.ndim == 0


def norm_pdf(x):
    arr, scalar = _as_array(x)
    out = kernels.norm_pdf(arr)
    return float(out[0]) if scalar else out


def norm_cdf(x):
    arr, scalar = _as_array(x)
    out = kernels.norm_cdf(arr)
    return float(out[0]) if scalar else out


def std_normal(x):
    """Standard normal density and CDF at x, as a (pdf, cdf) pair."""
    return norm_pdf(x), norm_cdf(x)


def quantile(p, df=None):
    """Quantile of the standard normal (df=None) or Student t with ``df``.

    ``df=inf`` is accepted and matches the normal quantile.
    """
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any((p_arr <= 0.0) | (p_arr >= 1.0)):
        raise ValueError("quantile probability must lie in (0, 1)")
    if df is None:
        out = _sps.norm.ppf(p_arr)
    else:
        df_arr = np.asarray(df, dtype=np.float64)
        if np.any(df_arr <= 0.0):
            raise ValueError("degrees of freedom must be positive")
        out = _sps.t.ppf(p_arr, df_arr)
    return float(out) if np.ndim(out) == 0 else out


def inverse_mills(x, selected=True):
    """phi(x)/Phi(x) for selected rows; -phi(x)/Phi(-x) for non-selected rows.

    The non-selected branch is the conditional-mean correction for rows whose
    outcome was censored by the selection mechanism.
    """
    arr, scalar = _as_array(x)
    out = kernels.mills(arr, selected)
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class RngStream:
    """Deterministic, schedule-independent random stream.

    Streams are keyed by (seed, stream_id, lineage) through a SeedSequence
    spawn key into a counter-based Philox generator, so replication r always
    sees the same draws no matter how many workers execute the study.
    """

    seed: int
    stream_id: int = 0
    lineage: tuple = field(default_factory=tuple)

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.lineage + tuple(ids))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed,
                                    spawn_key=(self.stream_id, *self.lineage))
        return np.random.Generator(np.random.Philox(ss))


def _resolve_rng(rng):
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng


def mvn_draw(mean, covariance, rng):
    """One draw from N(mean, covariance).

    The covariance is symmetrized, then factored by Cholesky with an
    escalating diagonal jitter (1e-12*trace/k up to 1e-6*trace/k) to absorb
    semidefiniteness at machine precision. Indefinite matrices beyond the
    jitter budget raise NumericError.
    """
    gen = _resolve_rng(rng)
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(covariance, dtype=np.float64)
    k = mean.shape[0]
    if cov.shape != (k, k):
        raise ValueError("covariance shape does not match mean length")
    if k == 0:
        return mean.copy()
    cov = 0.5 * (cov + cov.T)
    if not np.any(cov):
        return mean.copy()
    base = np.trace(cov) / k
    if not np.isfinite(base) or base < 0:
        raise NumericError("covariance trace is negative or non-finite")
    jitters = [0.0] + [base * 10.0 ** e for e in range(-12, -5)]
    z = gen.standard_normal(k)
    for jit in jitters:
        try:
            chol = np.linalg.cholesky(cov + jit * np.eye(k))
        except np.linalg.LinAlgError:
            continue
        return mean + chol @ z
    raise NumericError(
        "covariance is indefinite beyond the jitter budget (1e-6 * trace/k)")

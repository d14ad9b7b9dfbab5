"""numba @njit implementations of the hot kernels.

Same public surface as ``_numpy_impl``. Scalar special functions are built on
math.erfc plus an asymptotic continuation for the scaled complementary error
function, so the Mills ratio stays finite and accurate deep into both tails.
All kernels release the GIL and cache their compiled form on disk.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
INV_SQRT_PI = 1.0 / math.sqrt(math.pi)


@njit(cache=True, nogil=True)
def _erfcx_pos(z):
    # z >= 0. erfc(z)*exp(z^2) is safe up to z ~ 25; switch to the
    # asymptotic series 1/(z sqrt(pi)) * sum (-1)^n (2n-1)!!/(2 z^2)^n after.
    if z <= 25.0:
        return math.erfc(z) * math.exp(z * z)
    u = 1.0 / (2.0 * z * z)
    s = 1.0 + u * (-1.0 + u * (3.0 + u * (-15.0 + u * (105.0 + u * (-945.0 + u * 10395.0)))))
    return s * INV_SQRT_PI / z


@njit(cache=True, nogil=True)
def _erfcx(z):
    if z < 0.0:
        # erfcx(z) = 2 exp(z^2) - erfcx(-z); overflows to inf past z ~ -26.6,
        # which downstream ratios turn into a clean 0.
        return 2.0 * math.exp(z * z) - _erfcx_pos(-z)
    return _erfcx_pos(z)


@njit(cache=True, nogil=True)
def _norm_pdf_s(x):
    return INV_SQRT_2PI * math.exp(-0.5 * x * x)


@njit(cache=True, nogil=True)
def _norm_cdf_s(x):
    return 0.5 * math.erfc(-x / SQRT2)


@njit(cache=True, nogil=True)
def _log_norm_cdf_s(x):
    if x >= -1.0:
        # Phi(x) is not small here; for x >> 0 go through log1p of the
        # complementary tail to avoid log(1-eps) cancellation.
        return math.log1p(-0.5 * math.erfc(x / SQRT2))
    return -0.5 * x * x + math.log(0.5 * _erfcx(-x / SQRT2))


@njit(cache=True, nogil=True)
def _mills_s(x):
    # phi(x)/Phi(x) == sqrt(2/pi) / erfcx(-x/sqrt(2)), exactly, for all x.
    return SQRT_2_OVER_PI / _erfcx(-x / SQRT2)


@njit(cache=True, nogil=True)
def norm_pdf(x):
    out = np.empty(x.shape[0], dtype=np.float64)
    for i in range(x.shape[0]):
        out[i] = _norm_pdf_s(x[i])
    return out


@njit(cache=True, nogil=True)
def norm_cdf(x):
    out = np.empty(x.shape[0], dtype=np.float64)
    for i in range(x.shape[0]):
        out[i] = _norm_cdf_s(x[i])
    return out


@njit(cache=True, nogil=True)
def log_norm_cdf(x):
    out = np.empty(x.shape[0], dtype=np.float64)
    for i in range(x.shape[0]):
        out[i] = _log_norm_cdf_s(x[i])
    return out


@njit(cache=True, nogil=True)
def mills(x, selected=True):
    out = np.empty(x.shape[0], dtype=np.float64)
    if selected:
        for i in range(x.shape[0]):
            out[i] = _mills_s(x[i])
    else:
        for i in range(x.shape[0]):
            out[i] = -_mills_s(-x[i])
    return out


@njit(cache=True, nogil=True)
def probit_nll_grad_hess(beta, x, y):
    n, k = x.shape
    nll = 0.0
    grad = np.zeros(k, dtype=np.float64)
    hess = np.zeros((k, k), dtype=np.float64)
    for i in range(n):
        a = 0.0
        for j in range(k):
            a += x[i, j] * beta[j]
        q = 1.0 if y[i] else -1.0
        qa = q * a
        nll -= _log_norm_cdf_s(qa)
        lam = _mills_s(qa)
        u = q * lam
        w = lam * (lam + qa)
        for j in range(k):
            grad[j] -= u * x[i, j]
            wx = w * x[i, j]
            for l in range(j, k):
                hess[j, l] += wx * x[i, l]
    for j in range(k):
        for l in range(j):
            hess[j, l] = hess[l, j]
    return nll, grad, hess


@njit(cache=True, nogil=True)
def heckman_nll_grad(params, y_obs, x_obs, xs_obs, xs_mis):
    n1 = x_obs.shape[0]
    n0 = xs_mis.shape[0]
    p = x_obs.shape[1]
    q = xs_obs.shape[1]
    beta = params[:p]
    beta_s = params[p:p + q]
    tau = params[p + q]
    w = params[p + q + 1]
    grad = np.zeros(p + q + 2, dtype=np.float64)
    ok = abs(tau) <= 350.0 and abs(w) <= 350.0
    for j in range(p + q + 2):
        if not np.isfinite(params[j]):
            ok = False
    if not ok:
        return np.inf, grad
    inv_sigma = math.exp(-tau)
    # cosh(w) = 1/sqrt(1-rho^2) and sinh(w) = rho/sqrt(1-rho^2): the whole
    # likelihood is division-free in these, so wild optimizer probes cannot
    # blow up; overflow just turns into an infinite penalty below.
    ch = math.cosh(w)
    sh = math.sinh(w)

    ll = 0.0
    for i in range(n0):
        a = 0.0
        for j in range(q):
            a += xs_mis[i, j] * beta_s[j]
        a = min(max(a, -1e300), 1e300)
        ll += _log_norm_cdf_s(-a)
        lam0 = _mills_s(-a)
        for j in range(q):
            grad[p + j] -= lam0 * xs_mis[i, j]

    for i in range(n1):
        a = 0.0
        for j in range(q):
            a += xs_obs[i, j] * beta_s[j]
        xb = 0.0
        for j in range(p):
            xb += x_obs[i, j] * beta[j]
        z = (y_obs[i] - xb) * inv_sigma
        b = min(max(a * ch + z * sh, -1e300), 1e300)
        ll += -tau - 0.5 * z * z - LOG_SQRT_2PI + _log_norm_cdf_s(b)
        g = _mills_s(b)
        cb = (z - g * sh) * inv_sigma
        for j in range(p):
            grad[j] += cb * x_obs[i, j]
        gch = g * ch
        for j in range(q):
            grad[p + j] += gch * xs_obs[i, j]
        grad[p + q] += z * z - 1.0 - g * sh * z
        grad[p + q + 1] += g * (a * sh + z * ch)

    if not np.isfinite(ll):
        return np.inf, np.zeros(p + q + 2, dtype=np.float64)
    return -ll, -grad


@njit(cache=True, nogil=True)
def cart_build(x, y, min_leaf, mtry, sub_u):
    n, p = x.shape
    cap = 2 * (n // max(min_leaf, 1)) + 3
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap, dtype=np.float64)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    end = np.zeros(cap, dtype=np.int64)
    perm = np.arange(n)
    end[0] = n
    n_nodes = 1
    stack = np.empty(cap, dtype=np.int64)
    stack[0] = 0
    top = 1
    buf = np.empty(n, dtype=np.int64)
    use_sub = mtry < p
    n_cand = mtry if use_sub else p
    feat_idx = np.empty(p, dtype=np.int64)
    uc = 0
    while top > 0:
        top -= 1
        nid = stack[top]
        s, e = start[nid], end[nid]
        m = e - s
        if m < 2 * min_leaf:
            continue
        for i in range(p):
            feat_idx[i] = i
        if use_sub:
            if uc + mtry > sub_u.shape[0]:
                raise ValueError("cart_build: subsample buffer exhausted")
            for k in range(mtry):
                j = k + int(sub_u[uc] * (p - k))
                uc += 1
                if j >= p:
                    j = p - 1
                tmp = feat_idx[k]
                feat_idx[k] = feat_idx[j]
                feat_idx[j] = tmp
        t_lo = min_leaf - 1
        t_hi = m - min_leaf - 1
        best_score = -np.inf
        best_f = -1
        best_thr = 0.0
        for fi in range(n_cand):
            f = feat_idx[fi]
            vals = np.empty(m, dtype=np.float64)
            ys = np.empty(m, dtype=np.float64)
            for i in range(m):
                vals[i] = x[perm[s + i], f]
            order = np.argsort(vals, kind="mergesort")
            for i in range(m):
                ys[i] = y[perm[s + order[i]]]
            total = 0.0
            cs = np.empty(m, dtype=np.float64)
            for i in range(m):
                total += ys[i]
                cs[i] = total
            for t in range(t_lo, t_hi + 1):
                v0 = vals[order[t]]
                v1 = vals[order[t + 1]]
                if not (v0 < v1):
                    continue
                nl = float(t + 1)
                sl = cs[t]
                sr = total - sl
                score = sl * sl / nl + sr * sr / (m - nl)
                if score > best_score:
                    best_score = score
                    best_f = f
                    best_thr = 0.5 * (v0 + v1)
        if best_f < 0:
            continue
        n_left = 0
        for i in range(m):
            if x[perm[s + i], best_f] <= best_thr:
                buf[n_left] = perm[s + i]
                n_left += 1
        n_right = n_left
        for i in range(m):
            if not (x[perm[s + i], best_f] <= best_thr):
                buf[n_right] = perm[s + i]
                n_right += 1
        for i in range(m):
            perm[s + i] = buf[i]
        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        feature[nid] = best_f
        threshold[nid] = best_thr
        left[nid] = lid
        right[nid] = rid
        start[lid], end[lid] = s, s + n_left
        start[rid], end[rid] = s + n_left, e
        stack[top] = rid
        top += 1
        stack[top] = lid
        top += 1
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes],
            right[:n_nodes], start[:n_nodes], end[:n_nodes], perm)


@njit(cache=True, nogil=True)
def cart_leaf(x, feature, threshold, left, right):
    n = x.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if x[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@njit(cache=True, nogil=True)
def pmm_take(donor_sorted, recip, k, u):
    nd = donor_sorted.shape[0]
    nr = recip.shape[0]
    out = np.empty(nr, dtype=np.int64)
    width = 2 * k
    cand = np.empty(width, dtype=np.int64)
    dist = np.empty(width, dtype=np.float64)
    pos = np.searchsorted(donor_sorted, recip)
    for i in range(nr):
        for c in range(width):
            j = pos[i] - k + c
            if j < 0 or j >= nd:
                cand[c] = 0 if j < 0 else nd - 1
                dist[c] = np.inf
            else:
                cand[c] = j
                dist[c] = abs(donor_sorted[j] - recip[i])
        # stable insertion sort on distance keeps position-ascending ties,
        # matching the numpy backend's stable argsort.
        for c in range(1, width):
            dc = dist[c]
            cc = cand[c]
            j = c - 1
            while j >= 0 and dist[j] > dc:
                dist[j + 1] = dist[j]
                cand[j + 1] = cand[j]
                j -= 1
            dist[j + 1] = dc
            cand[j + 1] = cc
        out[i] = cand[int(u[i] * k)]
    return out

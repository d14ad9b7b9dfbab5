"""Pure-numpy reference implementations of the hot kernels.

Every function here has a numba twin in ``_numba_impl``; the package picks one
set at import time (see ``heckmi.kernels``). Discrete choices (CART splits,
PMM candidate ordering) are computed with sequential accumulation and stable
sorts so both backends make the same choices on the same inputs.
"""

from __future__ import annotations

import numpy as np
from scipy import special

SQRT2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def norm_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return INV_SQRT_2PI * np.exp(-0.5 * x * x)


def norm_cdf(x):
    x = np.asarray(x, dtype=np.float64)
    return special.ndtr(x)


def log_norm_cdf(x):
    x = np.asarray(x, dtype=np.float64)
    return special.log_ndtr(x)


def mills(x, selected=True):
    """Inverse Mills ratio phi(x)/Phi(x), or -phi(x)/Phi(-x) when selected=False.

    Computed through the scaled complementary error function, which keeps the
    ratio finite and accurate deep into both tails (no premature underflow of
    the numerator and denominator separately).
    """
    x = np.asarray(x, dtype=np.float64)
    if selected:
        return SQRT_2_OVER_PI / special.erfcx(-x / SQRT2)
    return -(SQRT_2_OVER_PI / special.erfcx(x / SQRT2))


def probit_nll_grad_hess(beta, x, y):
    """Negative log-likelihood, gradient and Hessian of a probit model.

    ``y`` is a boolean response vector. The Hessian returned is the observed
    information (positive definite wherever the design has full rank).
    """
    a = x @ beta
    q = np.where(y, 1.0, -1.0)
    qa = q * a
    nll = -log_norm_cdf(qa).sum()
    lam = mills(qa, True)
    grad = -(x.T @ (q * lam))
    w = lam * (lam + qa)
    hess = (x * w[:, None]).T @ x
    return nll, grad, hess


def heckman_nll_grad(params, y_obs, x_obs, xs_obs, xs_mis):
    """Negative log-likelihood and gradient of the selection model.

    Parameter layout: [beta (p), beta_s (q), log sigma, atanh rho]. Rows are
    pre-split into the observed block (outcome seen, selection design
    ``xs_obs``) and the missing block (``xs_mis`` only).
    """
    p = x_obs.shape[1]
    q = xs_obs.shape[1]
    beta = params[:p]
    beta_s = params[p:p + q]
    tau = params[p + q]
    w = params[p + q + 1]
    if not np.all(np.isfinite(params)) or abs(tau) > 350.0 or abs(w) > 350.0:
        return np.inf, np.zeros_like(params)
    inv_sigma = np.exp(-tau)
    # cosh(w) = 1/sqrt(1-rho^2) and sinh(w) = rho/sqrt(1-rho^2): the whole
    # likelihood is division-free in these, so wild optimizer probes cannot
    # blow up; overflow just turns into an infinite penalty below.
    ch = np.cosh(w)
    sh = np.sinh(w)

    a_obs = xs_obs @ beta_s
    a_mis = np.clip(xs_mis @ beta_s, -1e300, 1e300)
    z = (y_obs - x_obs @ beta) * inv_sigma
    b = np.clip(a_obs * ch + z * sh, -1e300, 1e300)

    ll = log_norm_cdf(-a_mis).sum()
    ll += (-tau - 0.5 * z * z - LOG_SQRT_2PI + log_norm_cdf(b)).sum()
    if not np.isfinite(ll):
        return np.inf, np.zeros_like(params)

    g = mills(b, True)
    lam0 = mills(-a_mis, True)

    d_beta = x_obs.T @ ((z - g * sh) * inv_sigma)
    d_beta_s = xs_obs.T @ (g * ch) - xs_mis.T @ lam0
    d_tau = (z * z - 1.0 - g * sh * z).sum()
    d_w = (g * (a_obs * sh + z * ch)).sum()

    grad = np.concatenate([d_beta, d_beta_s, [d_tau], [d_w]])
    return -ll, -grad


def cart_build(x, y, min_leaf, mtry, sub_u):
    """Grow a variance-reduction CART tree to full depth.

    When ``mtry < p`` each split considers a random subset of ``mtry``
    features, chosen by partial Fisher-Yates over the uniforms in ``sub_u``
    (consumed in node order; the buffer must hold at least mtry values per
    split attempt). With ``mtry >= p`` the search is exhaustive and ``sub_u``
    is ignored.

    Returns (feature, threshold, left, right, start, end, perm). Leaves have
    feature == -1; node ``i`` owns the training rows ``perm[start[i]:end[i]]``.
    Splits maximize sum_l^2/n_l + sum_r^2/n_r; exact ties go to the earliest
    candidate feature, then the lowest threshold.
    """
    n, p = x.shape
    cap = 2 * (n // max(min_leaf, 1)) + 3
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap, dtype=np.float64)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    end = np.zeros(cap, dtype=np.int64)
    perm = np.arange(n, dtype=np.int64)
    end[0] = n
    n_nodes = 1
    stack = [0]
    use_sub = mtry < p
    n_cand = mtry if use_sub else p
    feat_idx = np.empty(p, dtype=np.int64)
    uc = 0
    while stack:
        nid = stack.pop()
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
                feat_idx[k], feat_idx[j] = feat_idx[j], feat_idx[k]
        seg = perm[s:e]
        yseg = y[seg]
        t_lo = min_leaf - 1
        t_hi = m - min_leaf - 1
        best_score = -np.inf
        best_f = -1
        best_thr = 0.0
        for fi in range(n_cand):
            f = int(feat_idx[fi])
            vals = x[seg, f]
            order = np.argsort(vals, kind="mergesort")
            sv = vals[order]
            cs = np.cumsum(yseg[order])
            total = cs[-1]
            ts = np.arange(t_lo, t_hi + 1)
            ts = ts[sv[ts] < sv[ts + 1]]
            if ts.size == 0:
                continue
            nl = (ts + 1).astype(np.float64)
            sl = cs[ts]
            sr = total - sl
            score = sl * sl / nl + sr * sr / (m - nl)
            j = int(np.argmax(score))
            if score[j] > best_score:
                best_score = score[j]
                best_f = f
                best_thr = 0.5 * (sv[ts[j]] + sv[ts[j] + 1])
        if best_f < 0:
            continue
        mask = x[seg, best_f] <= best_thr
        n_left = int(mask.sum())
        left_rows = seg[mask]
        right_rows = seg[~mask]
        perm[s:s + n_left] = left_rows
        perm[s + n_left:e] = right_rows
        lid, rid = n_nodes, n_nodes + 1
        n_nodes += 2
        feature[nid] = best_f
        threshold[nid] = best_thr
        left[nid] = lid
        right[nid] = rid
        start[lid], end[lid] = s, s + n_left
        start[rid], end[rid] = s + n_left, e
        stack.append(rid)
        stack.append(lid)
    sl = slice(0, n_nodes)
    return (feature[sl], threshold[sl], left[sl], right[sl],
            start[sl], end[sl], perm)


def cart_leaf(x, feature, threshold, left, right):
    """Route rows of ``x`` down the tree; returns the leaf node id per row."""
    n = x.shape[0]
    node = np.zeros(n, dtype=np.int64)
    while True:
        f = feature[node]
        live = np.nonzero(f >= 0)[0]
        if live.size == 0:
            return node
        fv = x[live, f[live]]
        go_left = fv <= threshold[node[live]]
        node[live] = np.where(go_left, left[node[live]], right[node[live]])


def pmm_take(donor_sorted, recip, k, u):
    """Pick one of the ``k`` nearest donors for each recipient.

    ``donor_sorted`` must be ascending. Candidates are ranked by
    (|distance|, position); ``u`` in [0,1) selects uniformly among the first
    ``k``. Returns positions into ``donor_sorted``.
    """
    nd = donor_sorted.shape[0]
    nr = recip.shape[0]
    pos = np.searchsorted(donor_sorted, recip)
    offs = np.arange(-k, k)
    cand = pos[:, None] + offs
    inb = (cand >= 0) & (cand < nd)
    candc = np.clip(cand, 0, nd - 1)
    dist = np.abs(donor_sorted[candc] - recip[:, None])
    dist[~inb] = np.inf
    order = np.argsort(dist, axis=1, kind="stable")
    pick = (u * k).astype(np.int64)
    sel = order[np.arange(nr), pick]
    return candc[np.arange(nr), sel]

"""Time the numba kernels against the pure-numpy fallback.

Both backends are imported side by side (ignoring HECKMI_BACKEND, which only
picks the one the package binds at import time) and run on identical inputs
drawn from the default study design, so the numbers reflect the shapes the
simulation harness actually hits. Agreement is checked before timing; a
backend that is fast but wrong should never win a benchmark.

Usage:
    python benchmarks/bench_backends.py [--rows 4000] [--reps 7] [--seed 0]
"""

import argparse
import time

import numpy as np

from heckmi import simulate
from heckmi.data import encode_design
from heckmi.kernels import _numpy_impl as knp
from heckmi.stats import RngStream

try:
    from heckmi.kernels import _numba_impl as knb
except ImportError:
    knb = None


def build_problem(rows, seed):
    """One seed dataset at the default design, plus forest/pmm inputs."""
    cov = simulate.generate_covariates(rows, rng=RngStream(seed, 1))
    spec = simulate.default_spec()
    ds = simulate.build_seed_dataset(cov, spec, simulate.DEFAULT_OUTCOME_COEFS,
                                     simulate.DEFAULT_SELECTION_COEFS,
                                     -0.3, 1.0, RngStream(seed, 2))
    obs = ~np.isnan(ds.outcome)
    x = encode_design(ds, spec.outcome_covariates).values
    xs = encode_design(ds, spec.selection_covariates).values
    y_obs = ds.outcome[obs]
    x_obs = np.ascontiguousarray(x[obs])
    xs_obs = np.ascontiguousarray(xs[obs])
    xs_mis = np.ascontiguousarray(xs[~obs])

    gen = RngStream(seed, 3).generator()
    p, q = x.shape[1], xs.shape[1]
    params = np.concatenate([gen.normal(0, 0.3, p), gen.normal(0, 0.3, q),
                             [0.1], [-0.3]])
    beta_s = gen.normal(0, 0.3, q)
    r = obs.astype(np.float64)

    feat_obs = np.ascontiguousarray(x_obs[:, 1:])
    feat_mis = np.ascontiguousarray(x[~obs][:, 1:])
    n1, pf = feat_obs.shape
    mtry = max(1, pf // 3)
    cap = 2 * (n1 // 5) + 3
    sub_u = gen.random(cap * mtry)

    donors = np.sort(y_obs)
    recip = gen.normal(y_obs.mean(), y_obs.std(), feat_mis.shape[0])
    u = gen.random(recip.shape[0])

    return {
        "heckman_nll_grad": (params, y_obs, x_obs, xs_obs, xs_mis),
        "probit_nll_grad_hess": (beta_s, xs, r),
        "cart_build": (feat_obs, y_obs, 5, mtry, sub_u),
        "pmm_take": (donors, recip, 5, u),
    }


def check_agreement(args):
    checks = []
    na, ga = knp.heckman_nll_grad(*args["heckman_nll_grad"])
    nb, gb = knb.heckman_nll_grad(*args["heckman_nll_grad"])
    checks.append(("heckman_nll_grad",
                   abs(na - nb) <= 1e-9 * (1 + abs(na))
                   and np.allclose(ga, gb, rtol=1e-9, atol=1e-9)))
    ra = knp.probit_nll_grad_hess(*args["probit_nll_grad_hess"])
    rb = knb.probit_nll_grad_hess(*args["probit_nll_grad_hess"])
    checks.append(("probit_nll_grad_hess",
                   all(np.allclose(a, b, rtol=1e-9, atol=1e-9)
                       for a, b in zip(ra, rb))))
    ta = knp.cart_build(*args["cart_build"])
    tb = knb.cart_build(*args["cart_build"])
    checks.append(("cart_build",
                   all(np.array_equal(a, b) for a, b in zip(ta, tb))))
    pa = knp.pmm_take(*args["pmm_take"])
    pb = knb.pmm_take(*args["pmm_take"])
    checks.append(("pmm_take", np.array_equal(pa, pb)))
    return checks


def best_time(fn, args, reps):
    best = np.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=4000)
    ap.add_argument("--reps", type=int, default=7)
    ap.add_argument("--seed", type=int, default=0)
    opts = ap.parse_args()

    args = build_problem(opts.rows, opts.seed)

    if knb is None:
        print("numba backend unavailable; timing the numpy fallback only")
        for name in args:
            t = best_time(getattr(knp, name), args[name], opts.reps)
            print(f"  {name:22s} {t * 1e3:9.3f} ms")
        return

    print("agreement checks (numpy vs numba):")
    ok = True
    for name, passed in check_agreement(args):
        print(f"  {name:22s} {'OK' if passed else 'MISMATCH'}")
        ok &= passed
    if not ok:
        raise SystemExit("backend outputs disagree; timings withheld")

    # first calls above already warmed the jit cache
    print(f"\nkernel timings (rows={opts.rows}, best of {opts.reps}):")
    print(f"  {'kernel':22s} {'numba':>10s} {'numpy':>10s} {'speedup':>9s}")
    for name in args:
        tb = best_time(getattr(knb, name), args[name], opts.reps)
        tn = best_time(getattr(knp, name), args[name], opts.reps)
        print(f"  {name:22s} {tb * 1e3:8.3f}ms {tn * 1e3:8.3f}ms "
              f"{tn / tb:8.1f}x")


if __name__ == "__main__":
    main()

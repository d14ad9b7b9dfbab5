"""Hot-kernel backend selection.

Set ``HECKMI_BACKEND`` to ``numba``, ``numpy`` or ``auto`` (default) before
import. ``auto`` takes the numba implementation when numba is importable and
falls back to the pure-numpy one otherwise. Both expose the same functions:

    norm_pdf, norm_cdf, log_norm_cdf, mills,
    probit_nll_grad_hess, heckman_nll_grad,
    cart_build, cart_leaf, pmm_take

``benchmarks/bench_backends.py`` times the two implementations side by side.
"""

import os

_choice = os.environ.get("HECKMI_BACKEND", "auto").strip().lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ImportError(
        "HECKMI_BACKEND must be one of auto|numba|numpy, got %r" % _choice)

if _choice == "numpy":
    from . import _numpy_impl as _impl
    BACKEND = "numpy"
else:
    try:
        from . import _numba_impl as _impl
        BACKEND = "numba"
    except ImportError:
        if _choice == "numba":
            raise
        from . import _numpy_impl as _impl
        BACKEND = "numpy"

norm_pdf = _impl.norm_pdf
norm_cdf = _impl.norm_cdf
log_norm_cdf = _impl.log_norm_cdf
mills = _impl.mills
probit_nll_grad_hess = _impl.probit_nll_grad_hess
heckman_nll_grad = _impl.heckman_nll_grad
cart_build = _impl.cart_build
cart_leaf = _impl.cart_leaf
pmm_take = _impl.pmm_take

__all__ = [
    "BACKEND", "norm_pdf", "norm_cdf", "log_norm_cdf", "mills",
    "probit_nll_grad_hess", "heckman_nll_grad", "cart_build", "cart_leaf",
    "pmm_take",
]

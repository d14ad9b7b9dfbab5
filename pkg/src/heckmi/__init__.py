"""heckmi: Heckman-selection-based imputation for MNAR outcomes.

Single and multiple imputation built on the sample-selection model, Rubin
pooling with prediction intervals, and a Monte Carlo harness for comparing
imputation methods under controlled missingness mechanisms.
"""

__version__ = "0.1.0"

from .errors import ConfigError, ConvergenceError, DataError, HeckmiError, NumericError
from .stats import RngStream

__all__ = [
    "__version__", "HeckmiError", "ConfigError", "DataError", "NumericError",
    "ConvergenceError", "RngStream",
]

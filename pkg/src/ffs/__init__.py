"""Flow-based feature synthesis (FFS) for outlier-aware classification heads.

A normalizing flow models inlier feature vectors; low-likelihood samples
from it act as synthetic outliers that regularize an energy-based
classifier.  A class-conditional Gaussian baseline (VOS, VOS+) is included
for comparison.

Modules: ``numerics``, ``autodiff``, ``flow``, ``synthesis``, ``heads``,
``trainer``, ``evalkit``, ``datakit``, ``config``, ``experiment``,
``plotting`` and ``cli``.
"""

from .errors import ConfigError, FFSError, FormatError, InvalidArgument, NumericOverflow, ParseError

__version__ = "0.1.0"

__all__ = ["ConfigError", "FFSError", "FormatError", "InvalidArgument", "NumericOverflow",
           "ParseError", "__version__"]

"""Unified audio event detection at desk scale.

Subpackages cover the full pipeline: scene simulation with ground-truth
labels (:mod:`uaed.simulate`), the feature front end (:mod:`uaed.features`),
the query-based detector (:mod:`uaed.model`), training (:mod:`uaed.train`),
scoring (:mod:`uaed.metrics`), and interval/frame label plumbing
(:mod:`uaed.timeline`). The ``uaed`` console script in :mod:`uaed.cli`
exposes simulate/train/infer/score/derive subcommands.
"""

from .errors import AlignmentError, ConfigError, DataError, NumericError, UaedError

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "ConfigError",
    "DataError",
    "NumericError",
    "UaedError",
    "__version__",
]

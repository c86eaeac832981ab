"""filterkit: concurrent approximate-membership and counting filters.

Two filter families share a hashing core and a kernel layer with a compiled
backend (Cython) and a pure-Python fallback, selected automatically at
import:

* :class:`Tcf` / :class:`BulkTcf` -- two-choice block filters storing short
  tags, with point (per-key, lock-free) and bulk (sorted-batch) APIs.
* :class:`Gqf` -- a counting quotient filter with region locks, exact
  counting via variable-length count groups, and phased lock-free bulk
  operations.
"""

from ._backends import available_backends
from .errors import CapacityError, FilterFullError, ValidationError
from .gqf import Gqf, GqfParams
from .tcf import Placement, Tcf, TcfParams
from .tcf_bulk import BulkTcf, BulkTcfParams

__version__ = "0.1.0"

__all__ = [
    "Tcf",
    "TcfParams",
    "BulkTcf",
    "BulkTcfParams",
    "Gqf",
    "GqfParams",
    "Placement",
    "FilterFullError",
    "CapacityError",
    "ValidationError",
    "available_backends",
    "__version__",
]

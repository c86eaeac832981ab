"""Exception types shared by the filters."""


class FilterFullError(RuntimeError):
    """An insert found no free slot in either candidate block or the backing
    table."""


class CapacityError(RuntimeError):
    """A counting-quotient-filter insert hit the load ceiling or would shift
    slots past its region's hard bound."""


class ValidationError(AssertionError):
    """A structural invariant check failed."""

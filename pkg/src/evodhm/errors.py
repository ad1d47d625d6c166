"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """Raised when an operation is called with arguments that break its contract."""


class NumericError(FloatingPointError):
    """Raised when a NaN or Inf shows up while strict numerics are on."""


class DataError(IOError):
    """Raised for missing, malformed, or mismatched on-disk data."""

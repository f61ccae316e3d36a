"""Exception types shared across the package (mapped to CLI exit codes)."""


class DataError(ValueError):
    """Malformed, corrupt or version-mismatched input data."""


class VersionError(DataError):
    pass


class EnumerationError(DataError):
    """Exhaustive enumeration would exceed the configured size cap."""


class NumericalError(ArithmeticError):
    """A non-finite value reached a loss, gradient or parameter."""

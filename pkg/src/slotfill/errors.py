"""Exception types shared across the package."""


class SlotFillError(Exception):
    """Base class for package errors."""


class UsageError(SlotFillError):
    """Bad command line, unknown config key, or misused API. CLI exit code 1."""


class DataError(SlotFillError):
    """Malformed dataset, manifest, spec file, or checkpoint. CLI exit code 2."""


class NumericError(SlotFillError):
    """Non-finite values where finite ones are required. CLI exit code 3."""

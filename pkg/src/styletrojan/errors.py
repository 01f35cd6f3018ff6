"""Shared exception types."""


class ContractError(ValueError):
    """An operation precondition or data invariant was violated."""


class ConfigError(ValueError):
    """A configuration value is out of range or unknown."""


class SchemaError(ValueError):
    """A file or descriptor does not match the expected schema."""


class CapacityError(ValueError):
    """A sampling plan asks for more items than a class can provide."""


class NumericalError(RuntimeError):
    """A loss or statistic became non-finite."""

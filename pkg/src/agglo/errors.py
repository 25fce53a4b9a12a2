"""Exception hierarchy shared by every layer of the package."""


class AggloError(Exception):
    """Base class for all errors raised by :mod:`agglo`."""


class DimensionError(AggloError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(AggloError, ValueError):
    """A documented precondition was violated by the caller."""


class DataError(AggloError, ValueError):
    """Input data is malformed, empty, or out of range."""


class ConfigError(AggloError, ValueError):
    """A configuration value is missing, unknown, or invalid.

    The offending key is kept in :attr:`field` so the CLI can name it.
    """

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class CheckpointError(AggloError):
    """A checkpoint file is corrupt, truncated, or has an unknown version."""


class TrainingError(AggloError):
    """Training cannot continue (e.g. non-finite gradients)."""

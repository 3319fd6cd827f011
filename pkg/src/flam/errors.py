"""Exception hierarchy shared by every stage of the pipeline."""


class FlamError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(FlamError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes do not conform to the operation."""


class DomainError(FlamError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class ConfigError(FlamError, ValueError):
    """Invalid configuration."""


class SplitError(ConfigError):
    pass


class DataError(FlamError, ValueError):
    """Input data is malformed (zero-norm rows, bad labels, ...)."""


class FormatError(DataError):
    """A binary artifact could not be decoded.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(FlamError, RuntimeError):
    """Training diverged or could not start."""

"""Exception types shared across the package."""


class LMDMError(Exception):
    """Base class for all package errors."""


class DimensionError(LMDMError, ValueError):
    """Shapes are incompatible for the requested operation."""


class ContractError(LMDMError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(LMDMError, ValueError):
    """A configuration value is invalid or unknown."""


class FormatError(LMDMError, ValueError):
    """A binary or text file does not match its expected layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset

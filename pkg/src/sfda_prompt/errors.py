"""Exception hierarchy shared by every module."""


class SfdaError(Exception):
    """Base class for all package errors."""


class RejectedInputError(SfdaError, ValueError):
    """An operation received arguments that violate its preconditions."""


class ConfigError(SfdaError):
    """Bad experiment configuration (CLI exit code 1)."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(SfdaError):
    """Base class for binary file parse failures."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DimOverflowError(FormatError):
    pass


class VersionError(FormatError):
    pass

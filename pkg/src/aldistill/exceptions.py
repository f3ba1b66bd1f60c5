"""Exception hierarchy. Each family maps onto one CLI exit code."""


class ALDistillError(Exception):
    exit_code = 4


class ConfigError(ALDistillError, ValueError):
    """Bad configuration value, unknown key or missing required key."""

    exit_code = 2

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(ALDistillError, ValueError):
    """A file on disk does not follow its binary or text layout."""

    exit_code = 3

    def __init__(self, message, offset=None):
        self.offset = offset
        super().__init__(message)


class IntegrityError(FormatError):
    """Checksum or version mismatch in a persisted state file."""


class NumericError(ALDistillError, ArithmeticError):
    """Non-finite loss/gradient or an inconsistent geometric quantity."""

    exit_code = 4

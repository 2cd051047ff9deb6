"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes.
"""


class KGTransferError(Exception):
    exit_code = 2


class ConfigError(KGTransferError, ValueError):
    """Invalid configuration or arguments."""

    exit_code = 1


class DataError(KGTransferError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class NumericError(KGTransferError, ArithmeticError):
    """Non-finite values or failed numerical preconditions."""

    exit_code = 3


class CheckpointError(DataError):
    """Checkpoint or serialized artifact failed validation."""

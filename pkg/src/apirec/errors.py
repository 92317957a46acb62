"""Exception hierarchy shared across the pipeline.

The CLI maps these onto process exit codes: usage problems exit 1, data
problems exit 2, training failures exit 3.
"""


class ApiRecError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 2


class UsageError(ApiRecError):
    """Bad command line, config file, or argument combination."""

    exit_code = 1


class DataError(ApiRecError):
    """Invalid or inconsistent input data."""

    exit_code = 2


class MalformedApiError(DataError):
    """An API identifier string could not be parsed as ``Class.method``."""


class RecordError(DataError):
    """A line of a record file failed to parse or validate."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class EmptyIndexError(DataError):
    """Retrieval was attempted against an empty post index."""


class TrainingError(ApiRecError):
    """Model training could not start or did not finish sanely."""

    exit_code = 3

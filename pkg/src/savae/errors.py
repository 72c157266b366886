"""Exception hierarchy shared across the package."""


class SavaeError(Exception):
    """Base class for every error raised deliberately by this package."""


class ShapeError(SavaeError, ValueError):
    """Operand shapes do not fit together."""


class DomainError(SavaeError, ValueError):
    """A value lies outside the domain of an operation (log of 0, division by 0, NaN, ...)."""


class ConfigError(SavaeError, ValueError):
    """Invalid configuration or argument values."""


class DataError(SavaeError, ValueError):
    """Malformed dataset content.

    ``row`` is the 1-based line number in the source file (header is line 1) and
    ``column`` the header name of the offending cell, when known.
    """

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class TrainingError(SavaeError, RuntimeError):
    """Training aborted, e.g. because a loss or gradient became non-finite.

    ``last_good`` holds the most recent parameters known to be finite, if any.
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good

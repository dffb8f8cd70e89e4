"""Exception types shared across the package."""


class DataError(ValueError):
    """Input data is malformed or inconsistent with a model."""


class ParseError(DataError):
    """A transcript file could not be parsed.

    Parameters
    ----------
    message : str
        What went wrong.
    line : int, optional
        1-based line number in the source file.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(ArithmeticError):
    """A numerical routine could not produce a finite answer."""


class ModelFileError(DataError):
    """A persisted model file is unreadable, corrupt or of an unknown version."""

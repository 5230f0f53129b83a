class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


class DataError(ValueError):
    """Input data is missing, malformed or inconsistent."""


class MissingPrerequisiteError(DataError):
    """A training stage ran before the stage it depends on."""

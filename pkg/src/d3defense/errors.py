"""Exception hierarchy. Each class carries the CLI exit code for its error class."""


class D3Error(Exception):
    exit_code = 1


class D3IOError(D3Error):
    exit_code = 2


class FormatError(D3Error):
    exit_code = 3


class DimensionError(D3Error, ValueError):
    exit_code = 4


class LearningError(D3Error):
    exit_code = 5


class TrainingError(D3Error):
    """Toy classifier training diverged."""
    exit_code = 5

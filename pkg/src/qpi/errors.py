"""Exception hierarchy shared across the package."""


class QPIError(Exception):
    """Base class for all errors raised by qpi."""


class NumericFailure(QPIError):
    """A computation produced non-finite values."""


class InvalidGauge(QPIError):
    """Gauge matrix is singular or too ill-conditioned to invert."""


class GenerationFailure(QPIError):
    """Random model generation exhausted its retry budget."""


class CalibrationFailure(QPIError):
    pass


class DatasetError(QPIError):
    """Base class for dataset / file format problems."""


class MalformedLine(DatasetError):
    pass


class CoverageGap(DatasetError):
    """A required experiment (i, t, m) is absent."""


class DuplicateKey(DatasetError):
    pass


class AssemblyError(CoverageGap):
    """Hankel assembly hit a missing experiment."""


class RankMismatch(QPIError):
    pass


class Stage2Failure(QPIError):
    pass


class Stage3Timeout(QPIError):
    """Progressive fitting exceeded its pass limit.

    The best state reached so far is attached as ``best``.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class InputError(QPIError):
    pass


class BaselineInfeasible(QPIError):
    pass


class ConfigError(QPIError):
    pass

"""Exception hierarchy shared by all modules."""


class FgivError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(FgivError, ValueError):
    """Invalid user configuration (CLI exit code 2)."""


# panel ingestion
class MissingCell(FgivError, ValueError):
    pass


class DuplicateCell(FgivError, ValueError):
    pass


class NonNumericValue(FgivError, ValueError):
    pass


class DimensionMismatch(FgivError, ValueError):
    pass


# granularity
class InvalidMu(FgivError, ValueError):
    pass


class InvalidScale(FgivError, ValueError):
    pass


class NotNormalized(FgivError, ValueError):
    pass


class MuOutOfRange(FgivError, ValueError):
    pass


class TooFewTailObservations(FgivError, ValueError):
    pass


class DegenerateSample(FgivError, ValueError):
    pass


# factor model
class RankTooLarge(FgivError, ValueError):
    pass


class EigenFailure(FgivError, RuntimeError):
    pass


class KmaxTooLarge(FgivError, ValueError):
    pass


class RankDeficientLoadings(FgivError, ValueError):
    pass


class ZeroLoadingPeriod(FgivError, ValueError):
    pass


class SingularDesign(FgivError, RuntimeError):
    pass


# covariance
class NotPositiveDefinite(FgivError, RuntimeError):
    pass


class NoFeasibleC(FgivError, RuntimeError):
    pass


class InvalidRho(FgivError, ValueError):
    pass


# estimators
class LagWithoutTimeVaryingShares(FgivError, ValueError):
    pass


class WeakDenominator(FgivError, RuntimeError):
    pass


class SingularWeightMatrix(FgivError, RuntimeError):
    pass


class LagTooLarge(FgivError, ValueError):
    pass


# simulation
class InfeasibleTargets(FgivError, ValueError):
    pass


class TruthUnavailable(FgivError, ValueError):
    pass


class TooManyFailures(FgivError, RuntimeError):
    """Monte Carlo failure rate above the abort threshold."""

"""Exception types raised across the package."""


class SpeckleMotionError(Exception):
    """Base class for all package errors."""


class MissingFrame(SpeckleMotionError):
    pass


class DimensionMismatch(SpeckleMotionError, ValueError):
    pass


class UnsupportedBitDepth(SpeckleMotionError):
    pass


class PatchOutOfBounds(SpeckleMotionError, IndexError):
    pass


class EigSolveFailure(SpeckleMotionError):
    pass


class EmptySystem(SpeckleMotionError):
    pass


class ConvergenceFailure(SpeckleMotionError):
    pass


class RankDeficient(SpeckleMotionError):
    pass


class InvalidScene(SpeckleMotionError, ValueError):
    pass


class UnknownScenario(SpeckleMotionError, KeyError):
    pass


class ConstantSignal(SpeckleMotionError, ValueError):
    pass


class NoPropagationDetected(SpeckleMotionError):
    pass


class ChecksumMismatch(SpeckleMotionError):
    pass


class ConfigError(SpeckleMotionError, ValueError):
    pass

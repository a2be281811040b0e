"""Exception types raised across the package."""


class MGLabError(Exception):
    """Base class for all package errors."""


class InvalidRangeError(MGLabError, ValueError):
    pass


class UnknownClassError(MGLabError, ValueError):
    pass


class ProcessMismatchError(MGLabError, ValueError):
    pass


class EndpointTimeError(MGLabError, ValueError):
    pass


class DivergenceError(MGLabError, ArithmeticError):
    pass


class ArchitectureError(MGLabError, ValueError):
    pass


class ShapeMismatchError(MGLabError, ValueError):
    pass


class EmptySetError(MGLabError, ValueError):
    pass


class ConfigError(MGLabError, ValueError):
    pass


class CheckpointError(MGLabError):
    pass


class ChecksumMismatchError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TrainingDivergedError(MGLabError, ArithmeticError):
    pass

"""Exception hierarchy shared by every stage of the pipeline.

The CLI maps the three families below to distinct exit codes, so new
errors should subclass one of them rather than the base class.
"""


class VertebraLocatorError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class ConfigError(VertebraLocatorError):
    exit_code = 2


class ArtifactError(VertebraLocatorError):
    exit_code = 3


class MalformedHeaderError(ArtifactError):
    pass


class SizeMismatchError(ArtifactError):
    pass


class PayloadReadError(ArtifactError):
    pass


class MissingArtifactError(ArtifactError):
    pass


class NumericError(VertebraLocatorError):
    exit_code = 4


class DivergenceError(NumericError):
    def __init__(self, message, epoch=None, last_loss=None):
        super().__init__(message)
        self.epoch = epoch
        self.last_loss = last_loss


class ConvergenceError(NumericError):
    def __init__(self, message, residual=None, sweeps=None):
        super().__init__(message)
        self.residual = residual
        self.sweeps = sweeps


class KernelLearningError(NumericError):
    pass


class ShapeError(VertebraLocatorError, ValueError):
    """Tensor or grid geometry does not satisfy an operation's precondition."""

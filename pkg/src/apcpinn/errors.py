"""Exception hierarchy shared by all modules.

The CLI maps ``ConfigurationError`` to exit code 2 and ``DivergenceError`` to
exit code 3.
"""


class ApcPinnError(Exception):
    """Base class for every error raised by the package."""


class ConfigurationError(ApcPinnError, ValueError):
    """Invalid problem, experiment or schedule configuration."""


class NumericalError(ApcPinnError, ArithmeticError):
    """A numerical routine failed (factorization, conditioning, ...)."""


class DivergenceError(NumericalError):
    """Training or optimization produced non-finite values."""

    def __init__(self, message, epoch=None, index=None):
        super().__init__(message)
        self.epoch = epoch
        self.index = index


# autodiff
class BindingError(ApcPinnError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unbound variable"


class UnsupportedOrderError(ApcPinnError, ValueError):
    pass


class ArityError(ApcPinnError, ValueError):
    pass


class DivisionGuardError(NumericalError):
    pass


# fields
class GridSizeError(ApcPinnError, ValueError):
    pass


class CoefficientError(ApcPinnError, ValueError):
    pass


# reduction
class DegeneracyError(NumericalError):
    pass


class WhiteningError(NumericalError):
    pass


class DegenerateMeasureError(NumericalError):
    pass


class AlignmentError(ApcPinnError, ValueError):
    pass


# networks
class ShapeError(ApcPinnError, ValueError):
    pass


# harness / active learning
class DataAvailabilityError(ApcPinnError, LookupError):
    pass


class MetricError(ApcPinnError, ValueError):
    pass


class ArtifactMismatchError(ConfigurationError):
    """Artifacts produced under different configuration hashes."""

    pass

"""Exception hierarchy.

Each family maps to one CLI exit code (see ``dmdcast.cli``).
"""


class DmdcastError(Exception):
    exit_code = 1


class ContainerError(DmdcastError, ValueError):
    """Problem reading or writing a container file."""

    exit_code = 3


class MalformedHeaderError(ContainerError):
    pass


class DimensionMismatchError(ContainerError):
    pass


class TimeAxisError(ContainerError):
    pass


class DataError(DmdcastError, ValueError):
    """Inputs are well formed but unusable for the requested operation."""

    exit_code = 4


class WindowError(DataError):
    pass


class GridMismatchError(DataError):
    pass


class InsufficientSamplesError(DataError):
    pass


class EmptyWindowError(DataError):
    pass


class NumericalError(DmdcastError, ArithmeticError):
    exit_code = 5


class RankError(NumericalError, ValueError):
    pass


class RankDeficientError(NumericalError):
    pass


class UnpairedEigenvalueError(NumericalError):
    pass


class TrainingDivergedError(NumericalError):
    def __init__(self, epoch, step, value):
        self.epoch = epoch
        self.step = step
        self.value = value
        super().__init__(
            f"loss became non-finite ({value!r}) at epoch {epoch}, step {step}; "
            "try a smaller learning rate"
        )

"""Exception hierarchy shared by every module.

Each class carries an ``exit_code`` so the command line can map failures to a
category without inspecting messages.
"""


class NNUCBError(Exception):
    exit_code = 1


class DomainError(NNUCBError, ValueError):
    """Input outside the mathematical domain (non-unit vector, bad shape)."""

    exit_code = 2


class ArgumentError(NNUCBError, ValueError):
    exit_code = 2


class ConfigError(NNUCBError, ValueError):
    exit_code = 2


class FormatError(NNUCBError, ValueError):
    """Malformed data file (IDX, CSV, checkpoint)."""

    exit_code = 3


class DataError(NNUCBError, ValueError):
    exit_code = 3


class NumericalError(NNUCBError, ArithmeticError):
    """Factorization failure or a negative variance beyond roundoff."""

    exit_code = 4


class TrainingDivergence(NumericalError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss!r})")
        self.step = step
        self.loss = loss


class TraceError(NNUCBError, RuntimeError):
    """Internal invariant violated while running a policy."""

    exit_code = 5


class ExperimentAborted(NNUCBError):
    """A run stopped at step ``step``; ``partial`` holds the log up to then."""

    def __init__(self, step: int, cause: Exception, partial: list):
        super().__init__(f"run aborted at step {step}: {type(cause).__name__}: {cause}")
        self.step = step
        self.cause = cause
        self.partial = partial
        self.exit_code = getattr(cause, "exit_code", 1)

"""Exception types shared across the package."""


class InvalidParameterError(ValueError):
    """A parameter violates an operation's precondition."""


class ShapeError(ValueError):
    """Operand dimensions do not conform."""


class ParseError(ValueError):
    """A persisted file is malformed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericDegeneracyError(ArithmeticError):
    """A quantity needed as a divisor is (numerically) zero."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")

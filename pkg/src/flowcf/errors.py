"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Input violates an operation's preconditions."""


class SymmetryError(ArithmeticError):
    """Inverse DFT produced an imaginary residue above tolerance."""


class SingularSolveError(ArithmeticError):
    """Ridge solve hit a zero denominator with lambda = 0."""


class OracleSizeError(ValueError):
    """Brute-force oracle refused an input above its size cap."""


class ConsistencyError(RuntimeError):
    """An internal numerical consistency check failed."""


class FormatError(ValueError):
    """A binary or text file is malformed.

    ``offset`` is the byte offset (or line number for text files) where
    parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss

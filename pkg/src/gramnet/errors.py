"""Exception types shared across the package."""


class GramNetError(Exception):
    pass


class ShapeMismatch(GramNetError, ValueError):
    pass


# alias used by the linear-algebra layer
DimensionMismatch = ShapeMismatch


class PrecisionMismatch(GramNetError, TypeError):
    pass


class DecompositionFailure(GramNetError, ArithmeticError):
    """Cholesky hit a non-positive pivot.

    ``pivot`` is the zero-based row index at which factorisation stopped.
    ``layer`` is filled in by the network forward pass when known.
    """

    def __init__(self, pivot, message=None, layer=None):
        self.pivot = pivot
        self.layer = layer
        if message is None:
            message = f"non-positive pivot at index {pivot}"
        super().__init__(message)

    def __str__(self):
        msg = super().__str__()
        if self.layer is not None:
            msg = f"layer {self.layer}: {msg}"
        return msg


class ConvergenceFailure(GramNetError, ArithmeticError):
    pass


class NonFiniteInput(GramNetError, ValueError):
    pass


class NonPositiveDiagonal(GramNetError, ValueError):
    pass


class NonFiniteGradient(GramNetError, ArithmeticError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


class ConfigError(GramNetError, ValueError):
    pass


class FormatError(GramNetError, ValueError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class ChecksumMismatch(GramNetError, ValueError):
    pass


# failures that count as a numerically failed run rather than a usage error
NUMERICAL_ERRORS = (DecompositionFailure, ConvergenceFailure, NonFiniteInput,
                    NonPositiveDiagonal, NonFiniteGradient, FloatingPointError)

"""Exception types raised across trustforge."""


class TrustforgeError(Exception):
    """Base class for all library errors."""


class ContractError(TrustforgeError, ValueError):
    """A precondition on an argument was violated."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible for the requested operation."""


class FormatError(TrustforgeError, ValueError):
    """A binary file does not follow the expected layout."""


class LengthError(FormatError):
    """A binary payload is shorter or longer than its header declares."""

    def __init__(self, message: str, expected: int, actual: int):
        super().__init__(f"{message}: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class StratificationError(ContractError):
    """A class is too small to appear on both sides of a split."""


class AttackError(TrustforgeError, RuntimeError):
    """An adversarial attack produced a non-finite gradient."""


class AttributionError(TrustforgeError, RuntimeError):
    """An attribution could not be computed."""


class SingularityError(TrustforgeError, ArithmeticError):
    """A least-squares design matrix is rank deficient."""


class ConvergenceError(TrustforgeError, RuntimeError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message: str, gap: float):
        super().__init__(f"{message} (duality gap proxy {gap:.3e})")
        self.gap = gap


class DivergenceError(TrustforgeError, RuntimeError):
    """GAN training left the numerically sane regime."""

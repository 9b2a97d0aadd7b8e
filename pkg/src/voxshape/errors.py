"""Exception types shared across the package."""


class VoxShapeError(Exception):
    """Base class for all package errors."""


class ShapeError(VoxShapeError, ValueError):
    """Raised when an operation receives inputs with incompatible shapes."""

    def __init__(self, kind, message):
        self.kind = kind
        super().__init__(f"{kind}: {message}")


class NumericError(VoxShapeError, ArithmeticError):
    """A non-finite value appeared in a forward or backward pass."""


class NotTrainedError(VoxShapeError, RuntimeError):
    """Eval-mode use of a component that has not seen any training batch."""


class FormatError(VoxShapeError, ValueError):
    """Base class for file format problems."""


class BadMagic(FormatError):
    pass


class Truncated(FormatError):
    pass


class UnsupportedDtype(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class ConfigError(VoxShapeError, ValueError):
    """Invalid user-supplied configuration (CLI exit code 1)."""

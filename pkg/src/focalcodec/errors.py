"""Exception types raised across the package."""


class FocalCodecError(Exception):
    """Base class for all package errors."""


class ShapeError(FocalCodecError, ValueError):
    """Tensor shapes disagree.

    ``dim`` names the offending dimension, ``expected``/``actual`` carry the
    sizes when they are known.
    """

    def __init__(self, message, dim=None, expected=None, actual=None):
        super().__init__(message)
        self.dim = dim
        self.expected = expected
        self.actual = actual


class ConfigError(FocalCodecError, ValueError):
    pass


class FormatError(FocalCodecError, ValueError):
    """Malformed or unsupported file / bitstream."""


class TrainingDivergedError(FocalCodecError, RuntimeError):
    pass


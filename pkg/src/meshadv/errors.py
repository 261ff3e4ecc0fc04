"""Exception and warning classes shared across the package."""


class MeshAdvError(Exception):
    """Base class for every error raised by this package."""


# mesh
class ParseError(MeshAdvError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonTriangleError(MeshAdvError):
    pass


class IndexOutOfRange(MeshAdvError, IndexError):
    pass


class IoError(MeshAdvError, OSError):
    pass


class NonManifoldError(MeshAdvError):
    pass


class BoundaryError(MeshAdvError):
    pass


class DegenerateFaceError(MeshAdvError):
    pass


class DimensionMismatch(MeshAdvError, ValueError):
    pass


class ZeroEdgeError(MeshAdvError):
    pass


# spectral
class ConvergenceError(MeshAdvError):
    pass


class NearDegenerateWarning(UserWarning):
    pass


# grad
class ShapeMismatch(MeshAdvError, ValueError):
    pass


class NonFiniteValue(MeshAdvError, FloatingPointError):
    pass


class NonScalarRoot(MeshAdvError, ValueError):
    pass


# training / attacks
class DivergenceError(MeshAdvError):
    pass


class InvalidTarget(MeshAdvError, ValueError):
    pass


class NoAttackFound(MeshAdvError):
    pass


class EmptySplit(MeshAdvError):
    pass


# dataset
class InconsistentTopologyError(MeshAdvError):
    pass


class LabelParseError(MeshAdvError):
    pass


# configuration
class ConfigError(MeshAdvError, ValueError):
    pass

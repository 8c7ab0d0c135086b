"""Exception types raised across the package."""


class MeshError(Exception):
    """Base class for all errors raised by mmpdemesh."""


class DegenerateElement(MeshError):
    def __init__(self, element, det=None, message=None):
        self.element = int(element)
        self.det = det
        if message is None:
            message = f"element {self.element} is degenerate or inverted"
            if det is not None:
                message += f" (det E_K = {det:.3e})"
        super().__init__(message)


class NonSPDMetric(MeshError):
    pass


class UnsupportedDimension(MeshError):
    pass


class ParseError(MeshError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IndexBaseError(ParseError):
    pass


class SingularPatch(MeshError):
    pass


class ZeroSurfaceGradient(MeshError):
    pass


class NotCoercive(MeshError):
    """Raised when an operation needs a coercive functional (q > d/2)."""

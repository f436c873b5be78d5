"""Exception and warning classes raised across the package."""


class PolyotError(Exception):
    """Base class for all errors raised by polyot."""


class ZeroTotalMass(PolyotError, ValueError):
    pass


class ZeroTotalLength(PolyotError, ValueError):
    pass


class DegenerateInput(PolyotError, ValueError):
    """Sites cannot be triangulated (too few or affinely dependent)."""


class TraceStall(PolyotError, RuntimeError):
    """The segment tracer exceeded its step budget on a single segment."""


class LineSearchFailure(PolyotError, RuntimeError):
    """Strong-Wolfe search ran out of evaluations.

    ``best`` holds ``(step, value, gradient, payload)`` of the best ascent
    point seen, or ``None`` if no point improved on the start.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class StaleDual(PolyotError, ValueError):
    """Dual potential is too far from optimal for the envelope argument."""


class InnerSolveFailed(PolyotError, RuntimeError):
    pass


class ParseError(PolyotError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NearTangentCrossing(RuntimeWarning):
    """A segment crosses a Laguerre facet almost tangentially."""


class AdmmMaxIterations(RuntimeWarning):
    """ADMM stopped on its iteration cap before reaching tolerance."""


class IoError(PolyotError, OSError):
    """A file could not be read or written."""

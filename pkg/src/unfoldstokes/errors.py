"""Exception hierarchy. Each class carries the CLI exit code for its failure class."""


class UnfoldError(Exception):
    exit_code = 1


class MalformedInput(UnfoldError, ValueError):
    exit_code = 2


class ResonantLeadingMatrix(MalformedInput):
    """B(0,0) has a repeated eigenvalue."""


class GeometryError(UnfoldError, ValueError):
    exit_code = 2


class ResonanceError(UnfoldError):
    """A nonresonance precondition failed; `pair` names the blocking indices."""

    exit_code = 3

    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


class EigenvalueCollision(ResonanceError):
    pass


class IntegrationError(UnfoldError, RuntimeError):
    exit_code = 4


class LeakageError(UnfoldError):
    exit_code = 5

    def __init__(self, message, raw=None):
        super().__init__(message)
        self.raw = raw


class ContractionError(UnfoldError, RuntimeError):
    exit_code = 6

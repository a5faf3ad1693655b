"""Exception types shared across the solver."""


class SplitflowError(Exception):
    """Base class for all package-specific errors."""


class CaseParseError(SplitflowError):
    """Malformed case file. Carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CaseValidationError(SplitflowError):
    """Structurally invalid network case. Carries all diagnostics."""

    def __init__(self, diagnostics):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = list(diagnostics)


class SingularPointError(SplitflowError):
    """Device evaluation hit a singular operating point (collapsed voltage)."""

    def __init__(self, message, bus=None):
        super().__init__(message)
        self.bus = bus


class SingularSystemError(SplitflowError):
    """The assembled linear system could not be factorized."""

    def __init__(self, message, row=None, iteration=None):
        super().__init__(message)
        self.row = row
        self.iteration = iteration


class ContinuationError(SplitflowError):
    """Homotopy continuation could not reach the target problem."""

    def __init__(self, message, frontier=None):
        super().__init__(message)
        self.frontier = frontier


class SnappedInfeasibleError(SplitflowError):
    """Discrete snapping produced a case the solver cannot converge.

    Feasibility repair via optimization is out of scope; callers get the
    continuous solution plus this error.
    """

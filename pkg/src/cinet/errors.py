"""Exception types shared across the package."""


class CinetError(Exception):
    """Base class for all package-specific errors."""


class InputError(CinetError, ValueError):
    """Malformed or inconsistent user input (shapes, lengths, empty files)."""


class ParameterError(CinetError, ValueError):
    """Model or algorithm parameter outside its valid domain."""


class ParseError(CinetError, ValueError):
    """A text input failed to parse; carries the offending line number."""

    def __init__(self, message, line_no=None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class EvaluationError(CinetError, ArithmeticError):
    """Numerical evaluation failed; carries the offending coordinate."""

    def __init__(self, message, coordinate=None):
        self.coordinate = coordinate
        if coordinate is not None:
            message = f"{message} (coordinate: {coordinate})"
        super().__init__(message)


class OptimizationError(CinetError, RuntimeError):
    """Every optimizer start failed; carries the per-start trace."""

    def __init__(self, message, traces=None):
        self.traces = traces or []
        super().__init__(message)


class SamplerError(CinetError, RuntimeError):
    """MCMC update produced a non-finite conditional; names iteration and unit."""

    def __init__(self, message, iteration=None, unit=None):
        self.iteration = iteration
        self.unit = unit
        if iteration is not None or unit is not None:
            message = f"{message} (iteration={iteration}, unit={unit})"
        super().__init__(message)


class ReconciliationError(CinetError, ValueError):
    """Node ids present in one input but missing from another."""

    def __init__(self, message, orphans=()):
        self.orphans = sorted(orphans)
        if self.orphans:
            message = f"{message}: {', '.join(map(str, self.orphans))}"
        super().__init__(message)


class StudyError(CinetError, RuntimeError):
    """A simulation study exceeded its replicate failure budget."""

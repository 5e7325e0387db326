"""Exception types shared across the package."""


class RoutingError(Exception):
    """Base class for all package-specific errors."""


class ParseError(RoutingError):
    """Malformed input text (carries a line number where possible)."""


class UnsupportedFormatError(RoutingError):
    """Input uses a format feature outside the supported subset."""


class InvalidTransformError(RoutingError):
    """Geometric transform would move coordinates materially outside the unit square."""


class IllegalStateError(RoutingError):
    """Operation called on a state that cannot support it (e.g. terminal state)."""


class ConstraintViolationError(RoutingError):
    """An action violated a feasibility rule; the message names the rule."""


class InvalidSolutionError(RoutingError):
    """A solution failed its structural invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class InfeasibleInstanceError(RoutingError):
    """Instance cannot be solved under the active constraints (e.g. fewer cities than agents)."""


class BudgetExceededError(RoutingError):
    """Exact enumeration refused: instance exceeds the documented size limits."""


class ConfigError(RoutingError):
    """Invalid configuration value or file."""


class TrainingFaultError(RoutingError):
    """Training produced a non-finite loss; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot=None):
        self.snapshot = dict(snapshot or {})
        super().__init__(message)

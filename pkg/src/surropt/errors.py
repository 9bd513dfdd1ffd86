"""Exception types shared across the package."""


class SurroptError(Exception):
    """Base class for all package-specific errors."""


class ParameterError(SurroptError, ValueError):
    """An argument is outside its documented domain."""


class ShapeError(SurroptError, ValueError):
    """Array dimensions do not match the expected layout."""


class DataFormatError(SurroptError, ValueError):
    """A persisted file is malformed or violates a dataset invariant."""


class DegenerateSplitError(SurroptError, ValueError):
    """A train-test split left the training set empty."""


class NumericError(SurroptError, RuntimeError):
    """A computation produced non-finite intermediate values."""


class TrainingDivergedError(NumericError):
    """Network training cost became non-finite."""

    def __init__(self, message, last_finite_epoch=None):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch


class IllConditionedError(NumericError):
    """A Gram matrix could not be factorized even after nugget escalation."""


class DegenerateTargetsError(SurroptError, ValueError):
    """Classification targets contain a single class."""


class FitError(SurroptError, RuntimeError):
    """Model fitting failed to converge."""


class DegeneracyError(SurroptError, ValueError):
    """Points are affinely degenerate and cannot be triangulated."""


class BoundsRequiredError(SurroptError, ValueError):
    """A big-M encoding was requested without finite input bounds."""


class EmptyEligibleError(SurroptError, RuntimeError):
    """No region satisfies the current bounds/feasibility restrictions."""


class InternalError(SurroptError, RuntimeError):
    """An internal consistency assumption was violated."""


class ModeError(SurroptError, TypeError):
    """A classifier-only operation was called on a regression model."""


class EvaluationError(SurroptError, RuntimeError):
    """A formulation could not be evaluated at the requested input."""


class SolveError(SurroptError, RuntimeError):
    """The embedded solver failed structurally (not mere infeasibility)."""

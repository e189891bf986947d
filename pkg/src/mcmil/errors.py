"""Exception types raised across the package.

Anything deriving from ``ValidationError`` is a caller mistake (bad shapes,
bad files, bad config) and maps to CLI exit code 1.  Numeric failures during
training map to exit code 2.
"""


class MCMILError(Exception):
    pass


class ValidationError(MCMILError, ValueError):
    pass


class InputShapeError(ValidationError):
    pass


class RoutingError(ValidationError):
    pass


class ContractViolation(ValidationError):
    pass


class SynchronizationError(ValidationError):
    pass


class FeatureFileError(ValidationError):
    pass


class ManifestError(ValidationError):
    pass


class SpecError(ValidationError):
    pass


class UndefinedAUCError(ValidationError):
    pass


class TrainingDivergenceError(MCMILError, ArithmeticError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration

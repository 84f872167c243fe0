"""Exception hierarchy shared across the solvers."""


class DrCalibError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(DrCalibError):
    pass


class OutcomePresenceViolation(DrCalibError):
    def __init__(self, row: int):
        self.row = row
        super().__init__(f"outcome presence inconsistent with delta at row {row}")


class EmptyRespondentSet(DrCalibError):
    pass


class NonFiniteBasisValue(DrCalibError):
    def __init__(self, row: int, column: int):
        self.row = row
        self.column = column
        super().__init__(f"non-finite basis value at row {row}, column {column}")


class SeparationDetected(DrCalibError):
    pass


class SingularHessian(DrCalibError):
    pass


class MaxIterationsExceeded(DrCalibError):
    pass


class Unbounded(DrCalibError):
    pass


class SingularJacobian(DrCalibError):
    pass


class WeightOverflow(DrCalibError):
    pass


class Infeasible(DrCalibError):
    pass


class SingularNormalEquations(DrCalibError):
    pass


class NonConvergence(DrCalibError):
    pass


class SingularSystem(DrCalibError):
    def __init__(self, condition_number: float):
        self.condition_number = condition_number
        super().__init__(f"linear system is numerically singular (cond={condition_number:.3e})")


class AllFoldsFailed(DrCalibError):
    pass


class MissingColumn(DrCalibError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"required column not present: {column}")


class BracketFailure(DrCalibError):
    pass


class IdentityViolation(DrCalibError):
    """Weighting-form and imputation-form estimates disagree beyond tolerance."""


class DegenerateSigmaWarning(UserWarning):
    """Residual scale collapsed; the noise variance was pinned at its floor."""

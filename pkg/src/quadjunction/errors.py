"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
contract: 2 for invalid input, 3 for numerical failure.
"""


class QuadJunctionError(Exception):
    exit_code = 3


class ValidationError(QuadJunctionError):
    """Input parameters violate a documented precondition."""

    exit_code = 2


class NumericalError(QuadJunctionError):
    exit_code = 3


class ClosenessViolation(ValidationError):
    """Some weight satisfies c_i <= c_j / 2."""


class NotPositiveDefinite(ValidationError):
    """No tetrahedron realizes the requested edge lengths."""


class DomainError(ValidationError):
    """A patch parameter lies outside its parameter rectangle."""


class ResolutionTooCoarse(ValidationError):
    pass


class InterpolantInfeasible(NumericalError):
    pass


class PatchOverlap(ValidationError):
    """Two trough/valley footprints intersect."""


class GoodnormalsViolation(NumericalError):
    def __init__(self, message, worst=None):
        super().__init__(message)
        self.worst = worst


class NonconvergentPath(NumericalError):
    pass


class EnergyIncrease(NumericalError):
    """The explicit step increased the discrete energy."""


class NonStationary(RuntimeWarning):
    """Iteration cap reached with the update still above tolerance."""


class DecompositionResidual(RuntimeWarning):
    """Pairwise weights do not split exactly as c_i + c_j."""

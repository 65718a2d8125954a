"""Exception types shared across the package."""


class ConefieldError(Exception):
    """Base class for all package errors."""


class ParameterError(ConefieldError, ValueError):
    """An argument is outside its admissible range."""


class GeometryError(ConefieldError, ValueError):
    """Invalid or degenerate boundary geometry."""


class MeshError(ConefieldError, RuntimeError):
    """Triangulation failed or produced a non-conforming mesh."""


class CompatibilityError(ConefieldError, ValueError):
    """Neumann data incompatible with the interior source term."""

    def __init__(self, defect: float, tol: float):
        self.defect = defect
        self.tol = tol
        super().__init__(
            f"incompatible Neumann data: defect {defect:.3e} exceeds tolerance {tol:.1e}"
        )


class SolverError(ConefieldError, RuntimeError):
    """Linear solve failed or left an unacceptable residual."""


class ProximityError(ConefieldError, ValueError):
    """Evaluation point too close to a field singularity."""


class RecoveryError(ConefieldError, RuntimeError):
    """Charge recovery failed."""


class IndeterminateCountError(RecoveryError):
    """Singular-value gap too small to decide the number of charges."""


class RoutingError(ConefieldError, RuntimeError):
    """No admissible check curve between boundary loops was found."""

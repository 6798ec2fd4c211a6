"""Edge-basis multiscale method for 2D elliptic problems with rough coefficients."""

from .coefficient import CoefficientField, build_coefficient
from .errors import (
    DegenerateMesh,
    DimensionMismatch,
    FactorizationFailure,
    MsBasisError,
    NonNestedMesh,
    NonPositiveCoefficient,
    NumericalError,
    ProvenanceMismatch,
    RankDeficiencyWarning,
    ResolutionWarning,
    SingularCoarseSystem,
    ValidationError,
    ZeroReference,
)
from .fem import FineFunction, FineOperators, reference_solve
from .mesh import GridHierarchy, build_hierarchy

__version__ = "0.1.0"

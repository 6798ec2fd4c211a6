"""Exception and warning types shared across the package."""


class MsBasisError(Exception):
    """Base class for all package errors."""


class ValidationError(MsBasisError, ValueError):
    """Invalid user input (mesh sizes, config values, ...). CLI exit code 1."""


class NumericalError(MsBasisError, RuntimeError):
    """A solver-level failure. CLI exit code 2."""


class NonNestedMesh(ValidationError):
    pass


class DegenerateMesh(ValidationError):
    pass


class NonPositiveCoefficient(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class ProvenanceMismatch(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class ZeroReference(ValidationError):
    pass


class FactorizationFailure(NumericalError):
    pass


class SingularCoarseSystem(NumericalError):
    pass


class ResolutionWarning(UserWarning):
    """The fine grid does not resolve the coefficient's lattice."""


class RankDeficiencyWarning(UserWarning):
    """Fewer positive singular values than requested basis functions."""

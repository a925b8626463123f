"""Exception types shared across the package."""


class RobustUstatError(Exception):
    """Base class for all errors raised by this package."""


class InvalidMatrix(RobustUstatError):
    """Matrix input violates a structural precondition (non-finite, asymmetric, not PSD)."""


class SpectralDomainError(RobustUstatError):
    """A scalar function returned a non-finite value on some eigenvalue."""


class EffectiveRankUndefined(RobustUstatError):
    """Effective rank requested for the zero matrix."""


class DimError(RobustUstatError):
    """Dimension mismatch between operands."""


class ArityError(RobustUstatError):
    """Kernel arity is incompatible with the sample size."""


class PermutationError(RobustUstatError):
    """Index list is not a permutation of 0..n-1."""


class ParamError(RobustUstatError):
    """Scalar parameter outside its valid range."""


class AdmissibleSetEmpty(RobustUstatError):
    """No level of the adaptive grid satisfies the admissibility condition."""


class InsufficientData(RobustUstatError):
    """Too few samples (or degenerate data) for the requested operation."""


class ModelError(RobustUstatError):
    """Invalid synthetic-model specification."""


class ConfigError(RobustUstatError):
    """Malformed or inconsistent experiment configuration."""


class DataError(RobustUstatError):
    """Input data file cannot be parsed."""

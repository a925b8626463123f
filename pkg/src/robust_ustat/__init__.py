"""Heavy-tail-tolerant estimation of matrix-valued expectations.

Truncated modifications of operator-valued U-statistics, with robust
covariance estimation, adaptive scale selection, eigenvalue thresholding and
masked estimation built on top.
"""

from .errors import (
    AdmissibleSetEmpty,
    ArityError,
    ConfigError,
    DataError,
    DimError,
    EffectiveRankUndefined,
    InsufficientData,
    InvalidMatrix,
    ModelError,
    ParamError,
    PermutationError,
    RobustUstatError,
    SpectralDomainError,
)
from .matfun import (
    EigenDecomp,
    Psi_mat,
    Psi_scalar,
    apply_spectral,
    as_symmetric,
    dilation,
    effective_rank,
    eigh,
    frob_norm,
    hadamard,
    max_norm,
    nuclear_norm,
    op_norm,
    psi_mat,
    psi_scalar,
)
from .robust import (
    LepskiConfig,
    LepskiResult,
    RectKernelSpec,
    RobustParams,
    SolveReport,
    SolverOptions,
    descent_diagnostics,
    gradient,
    lepski_select,
    objective,
    solve,
    solve_rectangular,
    theta_from_sigma,
    xi_bound,
)
from .ustat import Dataset, KernelSpec, block_average, enumerate_tuples, u_statistic

__version__ = "0.1.0"

"""Covariance estimation built on the truncated pairwise-difference kernel.

The covariance of Y equals (1/2) E[(Y1 - Y2)(Y1 - Y2)^T], so the plain
pairwise U-statistic reproduces the usual sample covariance, and the
truncated estimator gives its heavy-tail-tolerant version.  Also here:
variance proxies from kurtosis bounds, moment-proxy estimation from data,
masked (entrywise reweighted) estimation, eigenvalue soft-thresholding and
the right-hand side of the Frobenius-risk oracle inequality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimError, InsufficientData, ParamError
from .matfun import as_symmetric, effective_rank, op_norm
from .robust import RobustParams, SolveReport, SolverOptions, solve, theta_from_sigma
from .ustat import Dataset, KernelSpec

# (1 + sqrt(2))^2 / 8, the constant of the rank term in the oracle inequality
ORACLE_RANK_CONST = (1.0 + math.sqrt(2.0)) ** 2 / 8.0


@dataclass
class CovEstimate:
    """Estimate with the parameters and solver diagnostics that produced it."""

    matrix: np.ndarray
    params_used: RobustParams
    report: SolveReport


@dataclass(frozen=True)
class MomentProxies:
    """Fourth-moment summaries: directional nu4, coordinate mu4, kurtosis bounds."""

    nu4: float
    mu4: float
    kurtosis_K: float
    kurtosis_Kprime: float

    def __post_init__(self):
        if not (self.nu4 > 0 and self.mu4 > 0 and self.kurtosis_K > 0 and self.kurtosis_Kprime > 0):
            raise ParamError("moment proxies must be positive")


def pairwise_kernel(dim: Optional[int] = None) -> KernelSpec:
    """H(y1, y2) = (y1 - y2)(y1 - y2)^T / 2, the rank-one covariance kernel."""

    def evaluate(y1, y2):
        y1 = np.asarray(y1, dtype=float)
        y2 = np.asarray(y2, dtype=float)
        if y1.shape != y2.shape or y1.ndim != 1:
            raise DimError(f"sample length mismatch: {y1.shape} vs {y2.shape}")
        z = (y1 - y2) / math.sqrt(2.0)
        return np.outer(z, z)

    def evaluate_batch(ys1, ys2):
        z = (ys1 - ys2) / math.sqrt(2.0)
        return z[:, :, None] * z[:, None, :]

    def factor_batch(ys1, ys2):
        return (ys1 - ys2) / math.sqrt(2.0)

    return KernelSpec(
        arity=2,
        output_dim=dim,
        evaluate=evaluate,
        evaluate_batch=evaluate_batch,
        factor_batch=factor_batch,
    )


def masked_pairwise_kernel(mask: np.ndarray) -> KernelSpec:
    """H_M(y1, y2) = M * (y1 - y2)(y1 - y2)^T / 2 (entrywise product)."""
    mask = as_symmetric(mask)
    d = mask.shape[0]

    def evaluate(y1, y2):
        y1 = np.asarray(y1, dtype=float)
        y2 = np.asarray(y2, dtype=float)
        if y1.shape != (d,) or y2.shape != (d,):
            raise DimError(f"samples must have length {d}")
        z = (y1 - y2) / math.sqrt(2.0)
        return mask * np.outer(z, z)

    def evaluate_batch(ys1, ys2):
        z = (ys1 - ys2) / math.sqrt(2.0)
        return mask[None, :, :] * (z[:, :, None] * z[:, None, :])

    def factor_batch(ys1, ys2):
        return (ys1 - ys2) / math.sqrt(2.0)

    return KernelSpec(
        arity=2,
        output_dim=d,
        evaluate=evaluate,
        evaluate_batch=evaluate_batch,
        factor_batch=factor_batch,
        hadamard_mask=mask,
    )


def sample_covariance(data: Dataset) -> np.ndarray:
    """Unbiased sample covariance (1/(n-1) normalization)."""
    if data.n < 2:
        raise InsufficientData(f"need n >= 2 samples, got {data.n}")
    x = data.samples
    xc = x - x.mean(axis=0)
    out = xc.T @ xc / (data.n - 1)
    return (out + out.T) / 2.0


def robust_covariance(
    data: Dataset,
    sigma: float,
    t: float,
    opts: Optional[SolverOptions] = None,
    psd: bool = False,
) -> CovEstimate:
    """Truncated pairwise-difference covariance estimator.

    Uses k = floor(n/2) blocks, theta = (1/sigma) sqrt(2 t / k).  The output
    is a free symmetric minimizer; set psd=True to clip negative eigenvalues
    afterwards.
    """
    if data.n < 2:
        raise InsufficientData(f"need n >= 2 samples, got {data.n}")
    params = theta_from_sigma(sigma, t, data.n // 2)
    report = solve(data, pairwise_kernel(data.p), params, opts)
    matrix = psd_project(report.estimate) if psd else report.estimate
    return CovEstimate(matrix=matrix, params_used=params, report=report)


def masked_robust_covariance(
    data: Dataset,
    mask: np.ndarray,
    delta: float,
    t: float,
    opts: Optional[SolverOptions] = None,
) -> CovEstimate:
    """Truncated estimator of M * Sigma with scale theta = (1/Delta) sqrt(2t/k)."""
    if data.n < 2:
        raise InsufficientData(f"need n >= 2 samples, got {data.n}")
    mask = as_symmetric(mask)
    if mask.shape[0] != data.p:
        raise DimError(f"mask is {mask.shape[0]}x{mask.shape[0]}, samples have length {data.p}")
    params = theta_from_sigma(delta, t, data.n // 2)
    report = solve(data, masked_pairwise_kernel(mask), params, opts)
    return CovEstimate(matrix=report.estimate, params_used=params, report=report)


def psd_project(a: np.ndarray) -> np.ndarray:
    """Nearest PSD matrix in Frobenius norm (eigenvalue clipping at zero)."""
    a = as_symmetric(a)
    w, v = np.linalg.eigh(a)
    out = (v * np.maximum(w, 0.0)) @ v.T
    return (out + out.T) / 2.0


def sigma_proxy_linear(kurtosis_K: float, sigma_ref: np.ndarray) -> float:
    """Variance proxy sqrt(K * r(Sigma)) * ||Sigma|| from a linear-form kurtosis bound."""
    if not kurtosis_K >= 1:
        raise ParamError(f"kurtosis bound must be >= 1, got {kurtosis_K}")
    sigma_ref = as_symmetric(sigma_ref)
    r = effective_rank(sigma_ref)
    return math.sqrt(kurtosis_K * r) * op_norm(sigma_ref)


def estimate_moment_proxies(
    data: Dataset, directions_per_dim: int = 50, seed: int = 0
) -> MomentProxies:
    """Empirical plug-in moment proxies.

    Coordinate quantities (mu4, K') are exact plug-ins.  The directional
    supremum behind nu4 and K is intractable, so it is lower-bounded by the
    maximum over the d coordinate directions plus directions_per_dim * d
    random unit directions (seeded); treat nu4 as a lower bound.
    """
    if data.n < 2:
        raise InsufficientData(f"need n >= 2 samples, got {data.n}")
    x = data.samples
    n, d = x.shape
    xc = x - x.mean(axis=0)
    var = (xc**2).mean(axis=0)
    if np.any(var <= 0.0):
        raise InsufficientData("a coordinate has zero variance; kurtosis is undefined")
    m4 = (xc**4).mean(axis=0)
    mu4 = float(np.max(m4) ** 0.25)
    kprime = float(np.max(m4 / var**2))

    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((directions_per_dim * d, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = np.vstack([np.eye(d), dirs])
    proj = xc @ dirs.T
    pvar = (proj**2).mean(axis=0)
    pm4 = (proj**4).mean(axis=0)
    nu4 = float(np.max(pm4) ** 0.25)
    kurt = float(np.max(pm4 / pvar**2))
    return MomentProxies(nu4=nu4, mu4=mu4, kurtosis_K=kurt, kurtosis_Kprime=kprime)


def mask_delta_proxy(mask: np.ndarray, proxies: MomentProxies) -> float:
    """sqrt(2) * ||M||_{1->2} * nu4 * mu4, with ||M||_{1->2} the max column 2-norm."""
    mask = as_symmetric(mask)
    col_norm = float(np.max(np.linalg.norm(mask, axis=0)))
    return math.sqrt(2.0) * col_norm * proxies.nu4 * proxies.mu4


def threshold_eigs(sigma_hat: np.ndarray, tau: float) -> np.ndarray:
    """Soft-threshold eigenvalues: sum max(lambda_j - tau/2, 0) v_j v_j^T.

    Equivalently the minimizer of ||S - Sigma_hat||_F^2 + tau ||S||_1 over
    symmetric S.  Output is PSD; negative eigenvalues are removed even at
    tau = 0.
    """
    if tau < 0:
        raise ParamError(f"tau must be >= 0, got {tau}")
    a = as_symmetric(sigma_hat)
    w, v = np.linalg.eigh(a)
    w = np.maximum(w - tau / 2.0, 0.0)
    out = (v * w) @ v.T
    return (out + out.T) / 2.0


def frobenius_oracle_rhs(s: np.ndarray, sigma: np.ndarray, tau: float) -> float:
    """||S - Sigma||_F^2 + ((1+sqrt(2))^2/8) tau^2 rank(S).

    rank counts eigenvalues above 1e-10 * ||S|| in absolute value.
    """
    s = as_symmetric(s)
    sigma = as_symmetric(sigma)
    if s.shape != sigma.shape:
        raise DimError(f"shape mismatch {s.shape} vs {sigma.shape}")
    w = np.linalg.eigvalsh(s)
    top = float(np.max(np.abs(w))) if w.size else 0.0
    rank = int(np.sum(np.abs(w) > 1e-10 * top)) if top > 0 else 0
    return float(np.linalg.norm(s - sigma) ** 2 + ORACLE_RANK_CONST * tau**2 * rank)

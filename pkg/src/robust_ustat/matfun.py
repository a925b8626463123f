"""Spectral calculus for dense real symmetric matrices.

Everything here is a pure function of ndarray inputs: eigendecomposition,
lifting scalar functions to matrix arguments, the bounded influence function
psi and its convex antiderivative Psi, the self-adjoint dilation of a
rectangular matrix, and the norms used throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimError, EffectiveRankUndefined, InvalidMatrix, SpectralDomainError

# Relative asymmetry beyond this is treated as user error, not roundoff.
ASYM_RTOL = 1e-8


def as_symmetric(a, rtol: float = ASYM_RTOL) -> np.ndarray:
    """Validate and symmetrize a square matrix.

    Returns ``(A + A.T) / 2``.  Raises :class:`InvalidMatrix` for non-finite
    or non-square input, or when the asymmetry exceeds ``rtol * ||A||_F``.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidMatrix(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidMatrix("matrix contains NaN or Inf")
    scale = np.linalg.norm(a)
    asym = np.linalg.norm(a - a.T)
    if asym > rtol * max(scale, 1e-300):
        raise InvalidMatrix(f"asymmetry {asym:.3e} exceeds {rtol:.1e} * ||A||_F")
    return (a + a.T) / 2.0


def require_finite(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise InvalidMatrix("matrix contains NaN or Inf")
    return a


@dataclass(frozen=True)
class EigenDecomp:
    """Eigendecomposition A = U diag(eigenvalues) U^T, eigenvalues ascending."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        u = self.eigenvectors
        return (u * self.eigenvalues) @ u.T


def eigh(a) -> EigenDecomp:
    """Full symmetric eigendecomposition with ascending eigenvalues."""
    a = as_symmetric(a)
    w, u = np.linalg.eigh(a)
    return EigenDecomp(eigenvalues=w, eigenvectors=u)


def apply_spectral(a, f: Callable) -> np.ndarray:
    """Lift the scalar function f to the symmetric matrix a via its spectrum.

    f is applied to the eigenvalue vector (vectorized call first, elementwise
    fallback) and the matrix is rebuilt as ``U f(Lambda) U^T``.
    """
    dec = eigh(a)
    w = dec.eigenvalues
    try:
        with np.errstate(all="ignore"):
            fw = np.asarray(f(w), dtype=float)
        if fw.shape != w.shape:
            raise ValueError
    except (TypeError, ValueError):
        with np.errstate(all="ignore"):
            fw = np.array([float(f(x)) for x in w])
    if not np.all(np.isfinite(fw)):
        raise SpectralDomainError("function returned a non-finite value on an eigenvalue")
    u = dec.eigenvectors
    out = (u * fw) @ u.T
    return (out + out.T) / 2.0


def psi_scalar(x):
    """Bounded odd influence function: x - sign(x) x^2/2 on [-1, 1], +-1/2 outside."""
    x = np.asarray(x, dtype=float)
    inner = x - np.sign(x) * x * x / 2.0
    out = np.where(np.abs(x) <= 1.0, inner, np.sign(x) * 0.5)
    return out if out.ndim else float(out)


def Psi_scalar(x):
    """Convex antiderivative of psi: x^2/2 - |x|^3/6 on [-1, 1], linear outside."""
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    inner = x * x / 2.0 - ax**3 / 6.0
    out = np.where(ax <= 1.0, inner, 1.0 / 3.0 + 0.5 * (ax - 1.0))
    return out if out.ndim else float(out)


def psi_mat(a) -> np.ndarray:
    """Spectral lift of psi_scalar."""
    return apply_spectral(a, psi_scalar)


def Psi_mat(a) -> np.ndarray:
    """Spectral lift of Psi_scalar."""
    return apply_spectral(a, Psi_scalar)


def dilation(a) -> np.ndarray:
    """Self-adjoint dilation [[0, A], [A^T, 0]] of a rectangular matrix.

    The operator norm of the dilation equals the largest singular value of A.
    """
    a = require_finite(a)
    if a.ndim != 2:
        raise InvalidMatrix(f"expected a 2-d array, got shape {a.shape}")
    d1, d2 = a.shape
    out = np.zeros((d1 + d2, d1 + d2))
    out[:d1, d1:] = a
    out[d1:, :d1] = a.T
    return out


def op_norm(a) -> float:
    """Operator norm: largest |eigenvalue| for symmetric input, else largest singular value."""
    a = require_finite(a)
    if a.ndim != 2:
        raise InvalidMatrix(f"expected a 2-d array, got shape {a.shape}")
    if a.shape[0] == a.shape[1] and np.array_equal(a, a.T):
        if a.shape[0] == 0:
            return 0.0
        return float(np.max(np.abs(np.linalg.eigvalsh(a))))
    s = np.linalg.svd(a, compute_uv=False)
    return float(s[0]) if s.size else 0.0


def frob_norm(a) -> float:
    return float(np.linalg.norm(require_finite(a)))


def nuclear_norm(a) -> float:
    """Sum of singular values."""
    a = require_finite(a)
    return float(np.sum(np.linalg.svd(a, compute_uv=False)))


def max_norm(a) -> float:
    """Largest entry in absolute value."""
    return float(np.max(np.abs(require_finite(a))))


def effective_rank(a) -> float:
    """tr(A) / ||A|| for a nonnegative definite matrix.

    Eigenvalues in [-1e-10 * ||A||, 0) are clamped to zero (roundoff);
    anything more negative raises :class:`InvalidMatrix`.  The zero matrix
    raises :class:`EffectiveRankUndefined`.
    """
    a = as_symmetric(a)
    w = np.linalg.eigvalsh(a)
    top = float(np.max(np.abs(w))) if w.size else 0.0
    if top == 0.0:
        raise EffectiveRankUndefined("effective rank of the zero matrix is undefined")
    if w[0] < -1e-10 * top:
        raise InvalidMatrix(f"matrix is not nonnegative definite (lambda_min = {w[0]:.3e})")
    w = np.maximum(w, 0.0)
    return float(np.sum(w) / np.max(w))


def hadamard(a, b) -> np.ndarray:
    """Entrywise product; operands must have equal shape."""
    a = require_finite(a)
    b = require_finite(b)
    if a.shape != b.shape:
        raise DimError(f"shape mismatch {a.shape} vs {b.shape}")
    return a * b

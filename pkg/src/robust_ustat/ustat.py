"""Operator-valued U-statistics: kernels, datasets, and exact averaging.

A kernel is a permutation-symmetric map from m samples to a symmetric d x d
matrix.  The U-statistic averages the kernel over all ordered m-tuples of
distinct indices.  For symmetric kernels the ordered average equals the
average over unordered combinations, which is the fast path used everywhere;
the full ordered enumeration is kept for verification.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import ArityError, InvalidMatrix, PermutationError

# Tuples are processed in fixed-size chunks so that parallel accumulation is
# bitwise independent of the thread count (per-chunk partial sums are always
# combined in chunk order).
CHUNK = 8192


@dataclass(frozen=True)
class KernelSpec:
    """Permutation-symmetric m-ary kernel with symmetric matrix values.

    evaluate(x_1, ..., x_m) maps m sample vectors to a (d, d) symmetric array.
    evaluate_batch, when given, maps m arrays of shape (B, p) to (B, d, d) and
    is used for vectorized accumulation.  factor_batch, when given, certifies
    structured values and maps m arrays of shape (B, p) to factors z of shape
    (B, d): H = z z^T when hadamard_mask is None, else H = mask * (z z^T).
    Solvers exploit this structure.
    """

    arity: int
    output_dim: Optional[int]
    evaluate: Callable[..., np.ndarray]
    evaluate_batch: Optional[Callable[..., np.ndarray]] = None
    factor_batch: Optional[Callable[..., np.ndarray]] = None
    hadamard_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.arity < 2:
            raise ArityError(f"kernel arity must be >= 2, got {self.arity}")


@dataclass(frozen=True)
class Dataset:
    """n samples of a length-p real vector, with seed provenance."""

    samples: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if a.ndim != 2 or a.shape[0] < 1:
            raise InvalidMatrix(f"expected (n, p) samples, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidMatrix("samples contain NaN or Inf")
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "samples", a)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def p(self) -> int:
        return self.samples.shape[1]


def enumerate_tuples(n: int, m: int) -> Iterator[tuple]:
    """All ordered m-tuples of distinct indices from 0..n-1, lexicographic."""
    if not 2 <= m <= n:
        raise ArityError(f"need 2 <= m <= n, got m={m}, n={n}")
    return itertools.permutations(range(n), m)


def num_tuples(n: int, m: int) -> int:
    return math.perm(n, m)


def _combination_chunks(n: int, m: int, chunk: int = CHUNK) -> Iterator[np.ndarray]:
    """Unordered index combinations in lexicographic order, as (B, m) arrays."""
    it = itertools.combinations(range(n), m)
    while True:
        block = list(itertools.islice(it, chunk))
        if not block:
            return
        yield np.asarray(block, dtype=np.intp)


class KahanSum:
    """Compensated accumulator for arrays of a fixed shape."""

    def __init__(self, shape):
        self.total = np.zeros(shape)
        self._comp = np.zeros(shape)

    def add(self, value):
        y = value - self._comp
        t = self.total + y
        self._comp = (t - self.total) - y
        self.total = t


def _eval_chunk(data: Dataset, kernel: KernelSpec, idx: np.ndarray) -> np.ndarray:
    """Kernel values for a (B, m) index array, shape (B, d, d)."""
    cols = [data.samples[idx[:, j]] for j in range(idx.shape[1])]
    if kernel.evaluate_batch is not None:
        return np.asarray(kernel.evaluate_batch(*cols), dtype=float)
    out = None
    for b in range(idx.shape[0]):
        h = np.asarray(kernel.evaluate(*(c[b] for c in cols)), dtype=float)
        if out is None:
            out = np.empty((idx.shape[0],) + h.shape)
        out[b] = h
    return out


def u_statistic(data: Dataset, kernel: KernelSpec, use_symmetry: bool = True) -> np.ndarray:
    """Exact average of the kernel over all ordered tuples of distinct indices.

    With ``use_symmetry`` (default) the sum runs over unordered combinations,
    which is exactly equal for permutation-symmetric kernels and m! times
    cheaper.  Accumulation is Kahan-compensated in fixed chunks.
    """
    n, m = data.n, kernel.arity
    if not 2 <= m <= n:
        raise ArityError(f"kernel arity {m} incompatible with n={n}")
    if use_symmetry:
        acc = None
        count = 0
        for idx in _combination_chunks(n, m):
            vals = _eval_chunk(data, kernel, idx)
            if acc is None:
                acc = KahanSum(vals.shape[1:])
            acc.add(vals.sum(axis=0))
            count += idx.shape[0]
        total = acc.total / count
    else:
        acc = None
        count = 0
        for tup in enumerate_tuples(n, m):
            h = np.asarray(kernel.evaluate(*(data.samples[i] for i in tup)), dtype=float)
            if acc is None:
                acc = KahanSum(h.shape)
            acc.add(h)
            count += 1
        total = acc.total / count
    return (total + total.T) / 2.0


def block_average(data: Dataset, kernel: KernelSpec, permutation: Sequence[int]) -> np.ndarray:
    """Average of the kernel over k = floor(n/m) disjoint blocks of a permutation."""
    n, m = data.n, kernel.arity
    perm = np.asarray(permutation, dtype=np.intp)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise PermutationError("index list is not a permutation of 0..n-1")
    if m > n:
        raise ArityError(f"kernel arity {m} incompatible with n={n}")
    k = n // m
    acc = None
    for b in range(k):
        block = perm[b * m : (b + 1) * m]
        h = np.asarray(kernel.evaluate(*(data.samples[i] for i in block)), dtype=float)
        if acc is None:
            acc = KahanSum(h.shape)
        acc.add(h)
    out = acc.total / k
    return (out + out.T) / 2.0

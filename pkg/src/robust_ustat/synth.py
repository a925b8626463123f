"""Seeded synthetic data: covariance builders, heavy-tailed samplers, masks, CSV I/O.

All randomness flows through numpy's counter-based Philox generator keyed by
the spec seed, with an independent spawned substream for contamination, so a
fixed seed reproduces samples bitwise and turning contamination off leaves
the clean stream untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError, ModelError
from .matfun import as_symmetric
from .ustat import Dataset

FAMILIES = ("gaussian", "student_t", "lognormal", "contaminated_gaussian")
MASK_KINDS = ("full", "diagonal", "banded")


@dataclass(frozen=True)
class CovModel:
    """Structured covariance builder.

    kind: "identity" | "spiked" (identity plus spike * e_i e_i^T on the first
    rank coordinates) | "toeplitz" (rho^|i-j|) | "banded" ((|i-j|+1)^-alpha).
    """

    kind: str
    d: int
    rank: int = 1
    spike: float = 1.0
    rho: float = 0.0
    alpha: float = 2.0

    def __post_init__(self):
        if self.d < 1:
            raise ModelError(f"dimension must be >= 1, got {self.d}")
        if self.kind not in ("identity", "spiked", "toeplitz", "banded"):
            raise ModelError(f"unknown covariance model {self.kind!r}")


def build_covariance(model: CovModel) -> np.ndarray:
    d = model.d
    if model.kind == "identity":
        return np.eye(d)
    if model.kind == "spiked":
        if not 1 <= model.rank <= d or model.spike < 0:
            raise ModelError("spiked model needs 1 <= rank <= d and spike >= 0")
        out = np.eye(d)
        out[: model.rank, : model.rank] += model.spike * np.eye(model.rank)
        return out
    if model.kind == "toeplitz":
        if not abs(model.rho) < 1:
            raise ModelError(f"toeplitz needs |rho| < 1, got {model.rho}")
        idx = np.arange(d)
        return model.rho ** np.abs(idx[:, None] - idx[None, :])
    # banded, polynomially decaying entries
    idx = np.arange(d)
    out = (np.abs(idx[:, None] - idx[None, :]) + 1.0) ** (-model.alpha)
    w = np.linalg.eigvalsh(out)
    if w[0] < -1e-10 * max(1.0, w[-1]):
        raise ModelError(f"banded model with alpha={model.alpha} is not PSD")
    return out


@dataclass(frozen=True)
class DistributionSpec:
    """Sampling model: family, mean, covariance (exactly the population
    covariance of the generated samples), and a 64-bit seed.

    student_t requires dof > 4 so that fourth moments exist; dof in (4, 4.5]
    is flagged near-critical.  contaminated_gaussian replaces each sample
    independently with probability eps by outlier_scale times a random unit
    vector.
    """

    family: str
    mean: np.ndarray
    covariance: np.ndarray
    seed: int
    dof: float = 0.0
    lognormal_scale: float = 1.0
    eps: float = 0.0
    outlier_scale: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown family {self.family!r}")
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = as_symmetric(self.covariance)
        if cov.shape[0] != mean.shape[0]:
            raise ModelError(f"mean has length {mean.shape[0]}, covariance is {cov.shape[0]}x{cov.shape[0]}")
        w = np.linalg.eigvalsh(cov)
        if w[0] < -1e-10 * max(1.0, float(w[-1])):
            raise ModelError("covariance must be PSD")
        if self.family == "student_t" and not self.dof > 4:
            raise ModelError(f"student_t requires dof > 4 (finite fourth moments), got {self.dof}")
        if self.family == "lognormal" and not self.lognormal_scale > 0:
            raise ModelError("lognormal scale must be positive")
        if self.family == "contaminated_gaussian" and not 0 <= self.eps < 1:
            raise ModelError(f"eps must be in [0, 1), got {self.eps}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def near_critical_tail(self) -> bool:
        """True for student_t with dof in (4, 4.5]: fourth moments barely finite."""
        return self.family == "student_t" and self.dof <= 4.5


def _cov_factor(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(cov)
    return v * np.sqrt(np.maximum(w, 0.0))


def sample(spec: DistributionSpec, n: int) -> Dataset:
    """Draw n i.i.d. samples; deterministic per seed, bitwise reproducible."""
    if n < 1:
        raise ModelError(f"need n >= 1, got {n}")
    main_ss, aux_ss = np.random.SeedSequence(spec.seed).spawn(2)
    rng = np.random.Generator(np.random.Philox(main_ss))
    d = spec.dim
    factor = _cov_factor(spec.covariance)
    z = rng.standard_normal((n, d))
    if spec.family == "gaussian" or spec.family == "contaminated_gaussian":
        x = spec.mean + z @ factor.T
        if spec.family == "contaminated_gaussian":
            aux = np.random.Generator(np.random.Philox(aux_ss))
            flips = aux.random(n) < spec.eps
            dirs = aux.standard_normal((n, d))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            x = np.where(flips[:, None], spec.outlier_scale * dirs, x)
    elif spec.family == "student_t":
        # scale so the returned samples have covariance exactly spec.covariance
        g = rng.chisquare(spec.dof, size=n) / spec.dof
        x = spec.mean + math.sqrt((spec.dof - 2.0) / spec.dof) * (z @ factor.T) / np.sqrt(g)[:, None]
    else:  # lognormal: standardized exp(scale * Z) coordinates, then the factor
        s = spec.lognormal_scale
        m = math.exp(s * s / 2.0)
        sd = math.sqrt(math.exp(2.0 * s * s) - math.exp(s * s))
        w = (np.exp(s * z) - m) / sd
        x = spec.mean + w @ factor.T
    return Dataset(samples=x, seed=spec.seed)


def build_mask(kind: str, d: int, b: Optional[int] = None) -> np.ndarray:
    """0/1 symmetric mask: "full", "diagonal", or "banded" with |i-j| <= b."""
    if d < 1:
        raise ModelError(f"dimension must be >= 1, got {d}")
    if kind == "full":
        return np.ones((d, d))
    if kind == "diagonal":
        return np.eye(d)
    if kind == "banded":
        if b is None or not 0 <= b < d:
            raise ModelError(f"banded mask needs 0 <= b < d, got b={b}, d={d}")
        idx = np.arange(d)
        return (np.abs(idx[:, None] - idx[None, :]) <= b).astype(float)
    raise ModelError(f"unknown mask kind {kind!r}")


def save_dataset_csv(data: Dataset, path) -> None:
    """One row per sample, header y0..y{p-1}, 17 significant digits."""
    with open(path, "w") as fh:
        fh.write(",".join(f"y{j}" for j in range(data.p)) + "\n")
        for row in data.samples:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def load_dataset_csv(path) -> Dataset:
    """Inverse of save_dataset_csv; malformed rows raise DataError with the line number."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError("empty CSV file")
    header = lines[0].split(",")
    p = len(header)
    if header != [f"y{j}" for j in range(p)]:
        raise DataError(f"line 1: expected header y0..y{p-1}, got {lines[0]!r}")
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != p:
            raise DataError(f"line {ln}: expected {p} fields, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise DataError(f"line {ln}: {exc}") from None
    if not rows:
        raise DataError("CSV contains a header but no data rows")
    arr = np.asarray(rows, dtype=float)
    if not np.all(np.isfinite(arr)):
        bad = int(np.argwhere(~np.isfinite(arr))[0][0]) + 2
        raise DataError(f"line {bad}: non-finite value")
    return Dataset(samples=arr, seed=None)

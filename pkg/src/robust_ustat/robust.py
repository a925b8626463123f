"""Truncated estimators of matrix-valued kernel expectations.

The estimator is the minimizer over symmetric U of

    tr F_theta(U),
    F_theta(U) = (1/theta^2) * avg over tuples of Psi(theta (H_tuple - U)),

a convex problem whose gradient is -(1/theta) * avg psi(theta (H - U)) and
whose solution is characterized by the stationarity condition
avg psi(theta (H - U)) = 0.  It is solved by gradient descent with constant
step size 1, which is valid because the gradient map is 1-Lipschitz.

Also here: the scale prescription theta = (1/sigma) sqrt(2 t / k), the
adaptive (comparison-of-estimates) selector over a geometric sigma grid, the
rectangular extension through the self-adjoint dilation, and diagnostics for
the descent iterates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from . import _accel
from .errors import AdmissibleSetEmpty, ArityError, DimError, ParamError
from .matfun import as_symmetric, dilation, op_norm
from .ustat import CHUNK, Dataset, KahanSum, KernelSpec, _combination_chunks, _eval_chunk, u_statistic

# Admissibility constant from the deviation bound for the truncated estimator.
ADMISSIBILITY_BOUND = 1.0 / 104.0
# Comparison-rule multiplier of the adaptive selector.
LEPSKI_COMPARISON = 46.0


@dataclass(frozen=True)
class RobustParams:
    """Truncation scale theta with the (sigma, t, k) triple that produced it."""

    theta: float
    t: float
    k: int
    sigma: float

    def __post_init__(self):
        if not (self.theta > 0 and self.t > 0 and self.k >= 1 and self.sigma > 0):
            raise ParamError("require theta > 0, t > 0, k >= 1, sigma > 0")


def theta_from_sigma(sigma: float, t: float, k: int) -> RobustParams:
    """theta = (1/sigma) sqrt(2 t / k)."""
    if not (sigma > 0 and t > 0 and k >= 1):
        raise ParamError(f"require sigma > 0, t > 0, k >= 1; got {sigma}, {t}, {k}")
    return RobustParams(theta=math.sqrt(2.0 * t / k) / sigma, t=t, k=int(k), sigma=sigma)


@dataclass(frozen=True)
class SolverOptions:
    """Gradient-descent controls.

    init is "zero", "ustat" (the plain U-statistic), or a custom symmetric
    matrix.  Convergence: ||grad||_F <= grad_tol * max(1, ||U||_F).
    """

    max_iter: int = 500
    grad_tol: float = 1e-8
    init: Union[str, np.ndarray] = "zero"
    cache_kernel_values: bool = False
    record_iterates: bool = False

    def __post_init__(self):
        if self.max_iter < 1 or not self.grad_tol > 0:
            raise ParamError("require max_iter >= 1 and grad_tol > 0")
        if isinstance(self.init, str) and self.init not in ("zero", "ustat"):
            raise ParamError(f"unknown init {self.init!r}")


@dataclass
class SolveReport:
    estimate: np.ndarray
    iterations: int
    grad_residual: float
    objective_trace: list
    converged: bool
    iterates: Optional[list] = None


@dataclass(frozen=True)
class LepskiConfig:
    """Geometric sigma grid sigma_j = sigma_min * gamma^j, j = 1..j_max.

    Level j uses confidence t_j = t + log(j (j+1)).  Admissibility of a level
    uses rh_bound (a bound on the effective rank of E(H - EH)^2) or, when
    trace_bound (a bound on tr E(H - EH)^2) is given, the weaker per-level
    condition trace_bound / sigma_j^2 * t_j / k <= 1/104.  With neither set, a
    plug-in effective rank is estimated from the data.
    """

    sigma_min: float
    t: float
    gamma: float = 2.0
    rh_bound: Optional[float] = None
    j_max: int = 64
    trace_bound: Optional[float] = None

    def __post_init__(self):
        if not (self.sigma_min > 0 and self.t > 0 and self.gamma > 1 and self.j_max >= 1):
            raise ParamError("require sigma_min > 0, t > 0, gamma > 1, j_max >= 1")
        if self.rh_bound is not None and not self.rh_bound > 0:
            raise ParamError("rh_bound must be positive")
        if self.trace_bound is not None and not self.trace_bound > 0:
            raise ParamError("trace_bound must be positive")


@dataclass
class LepskiLevel:
    j: int
    sigma: float
    t: float
    theta: float
    report: SolveReport


@dataclass
class LepskiResult:
    j_star: float  # level index, or math.inf when no level passes the comparison rule
    estimate: np.ndarray
    per_level: list


@dataclass(frozen=True)
class RectKernelSpec:
    """Permutation-symmetric kernel with rectangular (rows x cols) values."""

    arity: int
    rows: int
    cols: int
    evaluate: callable
    evaluate_batch: Optional[callable] = None

    def __post_init__(self):
        if self.arity < 2:
            raise ArityError(f"kernel arity must be >= 2, got {self.arity}")


class _Engine:
    """One estimation problem: fixed data, kernel and theta.

    Exposes a single pass computing the averaged psi matrix and the objective
    at a given U.  Rank-one structured kernels (factor_batch) go through the
    secular-equation path; everything else through per-tuple
    eigendecomposition.  Chunking is fixed so results do not depend on thread
    count.
    """

    def __init__(self, data: Dataset, kernel: KernelSpec, theta: float, cache_values: bool = False):
        n, m = data.n, kernel.arity
        if m > n:
            raise ArityError(f"kernel arity {m} incompatible with n={n}")
        self.data = data
        self.kernel = kernel
        self.theta = float(theta)
        self.count = math.comb(n, m)
        self.zfac = None
        self._chunks = None
        self.mask = kernel.hadamard_mask
        if kernel.factor_batch is not None:
            parts = []
            for idx in _combination_chunks(n, m):
                cols = [data.samples[idx[:, j]] for j in range(m)]
                parts.append(np.asarray(kernel.factor_batch(*cols), dtype=float))
            self.zfac = np.concatenate(parts, axis=0)
            self.dim = self.zfac.shape[1]
            # rank-deficient factors: the whole problem lives in span(Z), so
            # solve there (exact for iterates supported in the span); the
            # hadamard mask breaks that structure, so no reduction for it
            self._reduce_q = None
            self._zfac_red = None
            self._use_reduce = None
            if self.mask is None:
                gram = self.zfac.T @ self.zfac
                gw, gv = np.linalg.eigh(gram)
                top = float(gw[-1]) if gw.size else 0.0
                rank = int(np.sum(gw > top * 1e-20)) if top > 0 else 0
                if 0 < rank < self.dim:
                    self._reduce_q = gv[:, self.dim - rank :]
                    self._zfac_red = self.zfac @ self._reduce_q
        else:
            probe = np.asarray(
                kernel.evaluate(*(data.samples[i] for i in range(m))), dtype=float
            )
            if probe.ndim != 2 or probe.shape[0] != probe.shape[1]:
                raise DimError(f"kernel values must be square, got shape {probe.shape}")
            self.dim = probe.shape[0]
            if cache_values:
                self._chunks = [
                    _eval_chunk(data, kernel, idx) for idx in _combination_chunks(n, m)
                ]

    def plain_average(self) -> np.ndarray:
        """The plain U-statistic, using the stored factors when available."""
        if self.zfac is not None:
            out = self.zfac.T @ self.zfac / self.count
            if self.mask is not None:
                out = self.mask * out
            return (out + out.T) / 2.0
        return u_statistic(self.data, self.kernel)

    def psi_avg_and_objective(self, u: np.ndarray):
        """(avg psi(theta (H - U)), tr F_theta(U))."""
        theta = self.theta
        if self.zfac is not None and self.mask is not None:
            g, obj = _accel.masked_pass(self.zfac, self.mask, u, theta)
            return g / self.count, obj / (theta * theta * self.count)
        if self.zfac is not None:
            zfac = self.zfac
            lift = None
            if self._reduce_q is not None:
                if self._use_reduce is None:
                    # iterates stay in the span iff the starting point is there
                    u_red = self._reduce_q.T @ u @ self._reduce_q
                    leak = np.linalg.norm(u - self._reduce_q @ u_red @ self._reduce_q.T)
                    self._use_reduce = leak <= 1e-10 * max(1.0, float(np.linalg.norm(u)))
                if self._use_reduce:
                    zfac = self._zfac_red
                    lift = self._reduce_q
                    u = self._reduce_q.T @ u @ self._reduce_q
            dvals, basis = np.linalg.eigh(-theta * u)
            dreg = _accel.regularize_poles(dvals)
            w = (zfac @ basis) * math.sqrt(theta)
            g_in, obj = _accel.rank1_pass(dreg, w)
            g = basis @ (g_in / self.count) @ basis.T
            if lift is not None:
                g = lift @ g @ lift.T
            g = (g + g.T) / 2.0
            return g, obj / (theta * theta * self.count)
        acc = KahanSum((self.dim, self.dim))
        obj_acc = 0.0
        if self._chunks is not None:
            for vals in self._chunks:
                g, o = _accel.dense_pass(vals, u, theta)
                acc.add(g)
                obj_acc += o
        else:
            for idx in _combination_chunks(self.data.n, self.kernel.arity):
                vals = _eval_chunk(self.data, self.kernel, idx)
                g, o = _accel.dense_pass(vals, u, theta)
                acc.add(g)
                obj_acc += o
        return acc.total / self.count, obj_acc / (theta * theta * self.count)


def _check_u(u, dim) -> np.ndarray:
    u = as_symmetric(u)
    if u.shape[0] != dim:
        raise DimError(f"U has dimension {u.shape[0]}, kernel values have {dim}")
    return u


def objective(data: Dataset, kernel: KernelSpec, u, params: RobustParams) -> float:
    """tr F_theta(U); convex in U."""
    eng = _Engine(data, kernel, params.theta)
    _check_u(u, eng.dim)
    return eng.psi_avg_and_objective(as_symmetric(u))[1]


def gradient(data: Dataset, kernel: KernelSpec, u, params: RobustParams) -> np.ndarray:
    """Gradient of tr F_theta: -(1/theta) * avg psi(theta (H - U))."""
    eng = _Engine(data, kernel, params.theta)
    _check_u(u, eng.dim)
    psi_avg, _ = eng.psi_avg_and_objective(as_symmetric(u))
    return -psi_avg / params.theta


def _initial_point(opts: SolverOptions, data, kernel, dim) -> np.ndarray:
    if isinstance(opts.init, str):
        if opts.init == "zero":
            return np.zeros((dim, dim))
        return u_statistic(data, kernel)
    u0 = as_symmetric(opts.init)
    if u0.shape[0] != dim:
        raise DimError(f"init has dimension {u0.shape[0]}, kernel values have {dim}")
    return u0


def solve(
    data: Dataset,
    kernel: KernelSpec,
    params: RobustParams,
    opts: Optional[SolverOptions] = None,
) -> SolveReport:
    """Gradient descent with unit step for the truncated estimator.

    Stops when ||grad||_F <= grad_tol * max(1, ||U||_F); non-convergence
    within max_iter is reported, not raised.
    """
    opts = opts or SolverOptions()
    theta = params.theta
    eng = _Engine(data, kernel, theta, cache_values=opts.cache_kernel_values)
    u = _initial_point(opts, data, kernel, eng.dim)
    iterates = [u.copy()] if opts.record_iterates else None

    psi_avg, obj = eng.psi_avg_and_objective(u)
    trace = [obj]
    grad_res = float(np.linalg.norm(psi_avg)) / theta
    it = 0
    while grad_res > opts.grad_tol * max(1.0, float(np.linalg.norm(u))) and it < opts.max_iter:
        u = u + psi_avg / theta
        it += 1
        if iterates is not None:
            iterates.append(u.copy())
        psi_avg, obj = eng.psi_avg_and_objective(u)
        trace.append(obj)
        grad_res = float(np.linalg.norm(psi_avg)) / theta
    converged = grad_res <= opts.grad_tol * max(1.0, float(np.linalg.norm(u)))
    return SolveReport(
        estimate=u,
        iterations=it,
        grad_residual=grad_res,
        objective_trace=trace,
        converged=converged,
        iterates=iterates,
    )


def estimate_rh(data: Dataset, kernel: KernelSpec) -> float:
    """Plug-in effective rank of E(H - EH)^2, centered at the plain U-statistic."""
    center = u_statistic(data, kernel)
    n, m = data.n, kernel.arity
    acc = KahanSum(center.shape)
    count = 0
    for idx in _combination_chunks(n, m):
        vals = _eval_chunk(data, kernel, idx)
        r = vals - center
        acc.add(np.einsum("bij,bjk->ik", r, r))
        count += idx.shape[0]
    second = acc.total / count
    second = (second + second.T) / 2.0
    top = op_norm(second)
    if top <= 0.0:
        return 1.0
    return max(1.0, float(np.trace(second)) / top)


def xi_bound(sigma_star_guess: float, sigma_min: float, gamma: float) -> float:
    """log[(floor(log(s*/s_min)/log gamma) + 1)(same + 2)] for experiment design."""
    if not (sigma_star_guess > 0 and sigma_min > 0 and gamma > 1):
        raise ParamError("require positive scales and gamma > 1")
    if sigma_star_guess < sigma_min:
        raise ParamError("sigma_star_guess must be >= sigma_min")
    b = math.floor(math.log(sigma_star_guess / sigma_min) / math.log(gamma))
    return math.log((b + 1) * (b + 2))


def lepski_select(
    data: Dataset,
    kernel: KernelSpec,
    cfg: LepskiConfig,
    opts: Optional[SolverOptions] = None,
    warm_start: bool = True,
) -> LepskiResult:
    """Adaptive scale selection over the geometric sigma grid.

    Solves at every admissible level and returns the smallest level whose
    estimate is within 46 sigma_l sqrt(t_l / k) of all higher admissible
    levels.  When no level passes, j_star is +inf and the estimate is the
    zero matrix.  An empty admissible set is an error (distinct outcome).
    """
    opts = opts or SolverOptions()
    n, m = data.n, kernel.arity
    if m > n:
        raise ArityError(f"kernel arity {m} incompatible with n={n}")
    k = n // m

    rh = cfg.rh_bound
    if rh is None and cfg.trace_bound is None:
        rh = estimate_rh(data, kernel)

    levels = []
    for j in range(1, cfg.j_max + 1):
        sigma_j = cfg.sigma_min * cfg.gamma**j
        t_j = cfg.t + math.log(j * (j + 1))
        if cfg.trace_bound is not None:
            admissible = (cfg.trace_bound / sigma_j**2) * t_j / k <= ADMISSIBILITY_BOUND
        else:
            admissible = rh * t_j / k <= ADMISSIBILITY_BOUND
        if admissible:
            levels.append((j, sigma_j, t_j))
    if not levels:
        raise AdmissibleSetEmpty("no level satisfies the admissibility condition")

    per_level = []
    prev = None
    for j, sigma_j, t_j in levels:
        params = RobustParams(theta=math.sqrt(2.0 * t_j / k) / sigma_j, t=t_j, k=k, sigma=sigma_j)
        level_opts = opts
        if warm_start and prev is not None:
            level_opts = replace(opts, init=prev)
        rep = solve(data, kernel, params, level_opts)
        per_level.append(LepskiLevel(j=j, sigma=sigma_j, t=t_j, theta=params.theta, report=rep))
        prev = rep.estimate

    for a, lev in enumerate(per_level):
        ok = True
        for higher in per_level[a + 1 :]:
            bound = LEPSKI_COMPARISON * higher.sigma * math.sqrt(higher.t / k)
            if op_norm(higher.report.estimate - lev.report.estimate) > bound:
                ok = False
                break
        if ok:
            return LepskiResult(j_star=lev.j, estimate=lev.report.estimate, per_level=per_level)
    dim = per_level[0].report.estimate.shape[0]
    return LepskiResult(j_star=math.inf, estimate=np.zeros((dim, dim)), per_level=per_level)


def _dilate_kernel(kernel: RectKernelSpec) -> KernelSpec:
    d1, d2 = kernel.rows, kernel.cols

    def eval_dilated(*samples):
        return dilation(np.asarray(kernel.evaluate(*samples), dtype=float))

    batch = None
    if kernel.evaluate_batch is not None:

        def batch(*cols):
            vals = np.asarray(kernel.evaluate_batch(*cols), dtype=float)
            b = vals.shape[0]
            out = np.zeros((b, d1 + d2, d1 + d2))
            out[:, :d1, d1:] = vals
            out[:, d1:, :d1] = vals.transpose(0, 2, 1)
            return out

    return KernelSpec(
        arity=kernel.arity,
        output_dim=d1 + d2,
        evaluate=eval_dilated,
        evaluate_batch=batch,
    )


def solve_rectangular(
    data: Dataset,
    rect_kernel: RectKernelSpec,
    params: RobustParams,
    opts: Optional[SolverOptions] = None,
) -> np.ndarray:
    """Estimate a rectangular kernel expectation via the self-adjoint dilation.

    Runs the symmetric solver on tuples x -> [[0, H(x)], [H(x)^T, 0]] and
    returns the off-diagonal (rows x cols) block of the minimizer.
    """
    rep = solve(data, _dilate_kernel(rect_kernel), params, opts)
    return rep.estimate[: rect_kernel.rows, rect_kernel.rows :].copy()


def descent_diagnostics(report: SolveReport, u0, u_star_proxy, slack: float = 1e-9):
    """Check tr[F(U_j) - F(U*)] <= ||U0 - U*||_F^2 / (2 j) along the trace.

    The final trace value stands in for F(U*).  Returns (holds, worst_margin)
    where the margin is rhs - gap, minimized over recorded iterations.
    """
    trace = report.objective_trace
    if len(trace) < 2:
        return True, math.inf
    u0 = np.asarray(u0, dtype=float)
    prox = np.asarray(u_star_proxy, dtype=float)
    dist2 = float(np.linalg.norm(u0 - prox)) ** 2
    f_star = trace[-1]
    worst = math.inf
    tol = slack * max(1.0, abs(trace[0]))
    holds = True
    for j in range(1, len(trace)):
        gap = trace[j] - f_star
        margin = dist2 / (2.0 * j) - gap
        worst = min(worst, margin)
        if margin < -tol:
            holds = False
    return holds, worst

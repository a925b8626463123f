"""Seeded Monte Carlo harness shared by the CLI and the acceptance experiments.

A comparison task is a synthetic data spec plus a list of estimator blocks.
Reps derive independent seeds by spawning the root seed sequence, run in a
process pool (workers pin their numba thread count to 1), and results come
back in rep order regardless of scheduling.
"""

from __future__ import annotations

import multiprocessing
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import covariance as cov
from . import robust, synth
from .errors import ConfigError
from .matfun import frob_norm, hadamard, op_norm
from .robust import LepskiConfig, SolverOptions
from .ustat import Dataset


def rep_seeds(seed: int, reps: int) -> list:
    """Independent per-rep seeds via seed-sequence spawning."""
    children = np.random.SeedSequence(seed).spawn(reps)
    return [int(c.generate_state(1, np.uint64)[0]) for c in children]


@dataclass(frozen=True)
class CompareTask:
    """One synthetic comparison: distribution template, estimators, rep count."""

    family: str
    mean: tuple
    covariance: tuple  # row-major nested tuple, to stay hashable/picklable
    n: int
    estimators: tuple  # estimator blocks as plain dicts
    seed: int
    reps: int
    dof: float = 0.0
    lognormal_scale: float = 1.0
    eps: float = 0.0
    outlier_scale: float = 0.0
    solver: tuple = ()

    def spec_for(self, rep_seed: int) -> synth.DistributionSpec:
        return synth.DistributionSpec(
            family=self.family,
            mean=np.asarray(self.mean),
            covariance=np.asarray(self.covariance),
            seed=rep_seed,
            dof=self.dof,
            lognormal_scale=self.lognormal_scale,
            eps=self.eps,
            outlier_scale=self.outlier_scale,
        )


def make_task(spec_like: dict, estimators: list, seed: int, reps: int, solver: Optional[dict] = None) -> CompareTask:
    cov_arr = np.asarray(spec_like["covariance"], dtype=float)
    mean = np.asarray(spec_like.get("mean", np.zeros(cov_arr.shape[0])), dtype=float)
    return CompareTask(
        family=spec_like["family"],
        mean=tuple(mean.tolist()),
        covariance=tuple(map(tuple, cov_arr.tolist())),
        n=int(spec_like["n"]),
        estimators=tuple(dict(e) for e in estimators),
        seed=int(seed),
        reps=int(reps),
        dof=float(spec_like.get("dof", 0.0)),
        lognormal_scale=float(spec_like.get("lognormal_scale", 1.0)),
        eps=float(spec_like.get("eps", 0.0)),
        outlier_scale=float(spec_like.get("outlier_scale", 0.0)),
        solver=tuple(sorted((solver or {}).items())),
    )


def _solver_options(pairs) -> SolverOptions:
    kw = dict(pairs)
    return SolverOptions(
        max_iter=int(kw.get("max_iter", 500)),
        grad_tol=float(kw.get("grad_tol", 1e-8)),
        init=kw.get("init", "zero"),
    )


def run_estimator_block(block: dict, data: Dataset, opts: SolverOptions):
    """Run one estimator block; returns (matrix, target_mask_or_None, info)."""
    kind = block["name"]
    info = {"iterations": 0, "converged": True, "grad_residual": 0.0, "theta": 0.0, "k": 0}
    if kind == "sample":
        return cov.sample_covariance(data), None, info

    if kind == "robust":
        est = cov.robust_covariance(data, sigma=float(block["sigma"]), t=float(block["t"]), opts=opts)
        rep = est.report
        info.update(
            iterations=rep.iterations,
            converged=rep.converged,
            grad_residual=rep.grad_residual,
            theta=est.params_used.theta,
            k=est.params_used.k,
        )
        return est.matrix, None, info

    if kind == "masked":
        mask_cfg = block["mask"]
        mask = synth.build_mask(mask_cfg["kind"], data.p, mask_cfg.get("b"))
        est = cov.masked_robust_covariance(
            data, mask, delta=float(block["delta"]), t=float(block["t"]), opts=opts
        )
        rep = est.report
        info.update(
            iterations=rep.iterations,
            converged=rep.converged,
            grad_residual=rep.grad_residual,
            theta=est.params_used.theta,
            k=est.params_used.k,
        )
        return est.matrix, mask, info

    if kind == "robust-adaptive":
        cfg = LepskiConfig(
            sigma_min=float(block["sigma_min"]),
            t=float(block["t"]),
            gamma=float(block.get("gamma", 2.0)),
            rh_bound=float(block["rh_bound"]) if "rh_bound" in block else None,
            trace_bound=float(block["trace_bound"]) if "trace_bound" in block else None,
            j_max=int(block.get("j_max", 64)),
        )
        res = robust.lepski_select(data, cov.pairwise_kernel(data.p), cfg, opts)
        last = res.per_level[-1].report
        info.update(
            iterations=sum(lv.report.iterations for lv in res.per_level),
            converged=all(lv.report.converged for lv in res.per_level),
            grad_residual=last.grad_residual,
            theta=res.per_level[-1].theta,
            k=data.n // 2,
            j_star=res.j_star,
        )
        return res.estimate, None, info

    if kind == "thresholded":
        base, mask, info = run_estimator_block(block["base"], data, opts)
        out = cov.threshold_eigs(base, float(block["tau"]))
        return out, mask, info

    raise ConfigError(f"unknown estimator {kind!r}")


def _run_rep(args):
    task, rep_id, rep_seed = args
    spec = task.spec_for(rep_seed)
    data = synth.sample(spec, task.n)
    truth = np.asarray(spec.covariance)
    opts = _solver_options(task.solver)
    rows = []
    for block in task.estimators:
        t0 = time.perf_counter()
        matrix, mask, info = run_estimator_block(block, data, opts)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        target = hadamard(mask, truth) if mask is not None else truth
        rows.append(
            {
                "rep": rep_id,
                "seed": rep_seed,
                "estimator": block["name"],
                "error_op": op_norm(matrix - target),
                "error_frob": frob_norm(matrix - target),
                "iterations": info["iterations"],
                "converged": info["converged"],
                "wall_time_ms": wall_ms,
                "j_star": info.get("j_star"),
            }
        )
    return rows


def _worker_init():
    os.environ["OMP_NUM_THREADS"] = "1"
    try:
        import numba

        numba.set_num_threads(1)
    except ImportError:
        pass


def _main_is_importable() -> bool:
    """Child processes re-import __main__; bail out to inline execution when
    the parent was started from stdin or an interactive session."""
    main = sys.modules.get("__main__")
    path = getattr(main, "__file__", None)
    if getattr(main, "__spec__", None) is not None:
        return True
    return bool(path) and os.path.exists(path)


def run_compare(task: CompareTask, threads: Optional[int] = None) -> list:
    """All reps of a comparison; returns rows flat, in rep order."""
    threads = threads or os.cpu_count() or 1
    seeds = rep_seeds(task.seed, task.reps)
    jobs = [(task, i, s) for i, s in enumerate(seeds)]
    if threads <= 1 or task.reps == 1 or not _main_is_importable():
        results = [_run_rep(j) for j in jobs]
    else:
        # forkserver: plain fork after numba's OpenMP layer has started is
        # unsafe; children import __main__ afresh, hence the guard above
        ctx = multiprocessing.get_context("forkserver")
        with ProcessPoolExecutor(max_workers=threads, initializer=_worker_init, mp_context=ctx) as pool:
            results = list(pool.map(_run_rep, jobs))
    return [row for rep_rows in results for row in rep_rows]


def summarize(rows: list) -> dict:
    """Per-estimator mean/median/95th-quantile of the operator-norm error."""
    out = {}
    names = []
    for row in rows:
        if row["estimator"] not in names:
            names.append(row["estimator"])
    for name in names:
        errs = np.asarray([r["error_op"] for r in rows if r["estimator"] == name])
        out[name] = {
            "mean_op": float(errs.mean()),
            "median_op": float(np.median(errs)),
            "q95_op": float(np.quantile(errs, 0.95)),
        }
    return out

"""Batch front-end: estimate on CSV or synthetic data, seeded Monte Carlo
comparisons, and an embedded invariant self-check.

Configuration is a single JSON document; unknown keys are rejected so typos
in experiment definitions fail loudly.  All randomness flows from the config
seed.  Exit codes: 0 ok, 1 selfcheck failure, 2 config error, 3 data error,
4 non-convergence under --strict.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import covariance as cov
from . import matfun, mc, synth, ustat
from .errors import ConfigError, DataError, RobustUstatError
from .robust import SolverOptions
from .ustat import Dataset

_TOP_KEYS = {"seed", "data", "estimator", "estimators", "solver", "reps", "output"}
_DATA_KEYS = {"csv", "synthetic"}
_SYNTH_KEYS = {"family", "n", "mean", "covariance", "dof", "lognormal_scale", "eps", "outlier_scale"}
_COV_KEYS = {"kind", "d", "rank", "spike", "rho", "alpha"}
_SOLVER_KEYS = {"max_iter", "grad_tol", "init"}
_EST_KEYS = {
    "sample": {"name"},
    "robust": {"name", "sigma", "t"},
    "masked": {"name", "delta", "t", "mask"},
    "robust-adaptive": {"name", "sigma_min", "gamma", "t", "rh_bound", "trace_bound", "j_max"},
    "thresholded": {"name", "tau", "base"},
}
_MASK_KEYS = {"kind", "b"}


def _check_keys(obj: dict, allowed: set, ctx: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{ctx}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{ctx}: unknown keys {sorted(unknown)}")


def _check_estimator(block: dict, ctx: str) -> None:
    if not isinstance(block, dict) or "name" not in block:
        raise ConfigError(f"{ctx}: estimator needs a 'name'")
    name = block["name"]
    if name not in _EST_KEYS:
        raise ConfigError(f"{ctx}: unknown estimator {name!r}")
    _check_keys(block, _EST_KEYS[name], ctx)
    if name == "masked":
        _check_keys(block["mask"], _MASK_KEYS, ctx + ".mask")
    if name == "thresholded":
        _check_estimator(block["base"], ctx + ".base")
        if block["base"]["name"] in ("sample", "thresholded"):
            pass  # thresholding the sample covariance is allowed


@dataclass
class ExperimentConfig:
    """Validated experiment description; round-trips through to_dict/from_dict."""

    seed: Optional[int] = None
    csv_path: Optional[str] = None
    synthetic: Optional[dict] = None
    estimator: Optional[dict] = None
    estimators: list = field(default_factory=list)
    solver: dict = field(default_factory=dict)
    reps: Optional[int] = None
    output: Optional[str] = None

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        _check_keys(obj, _TOP_KEYS, "config")
        if "data" not in obj:
            raise ConfigError("config: missing 'data'")
        _check_keys(obj["data"], _DATA_KEYS, "config.data")
        if len(obj["data"]) != 1:
            raise ConfigError("config.data: exactly one of 'csv' or 'synthetic'")
        csv_path = obj["data"].get("csv")
        synthetic = obj["data"].get("synthetic")
        if synthetic is not None:
            _check_keys(synthetic, _SYNTH_KEYS, "config.data.synthetic")
            for key in ("family", "n", "covariance"):
                if key not in synthetic:
                    raise ConfigError(f"config.data.synthetic: missing {key!r}")
            if isinstance(synthetic["covariance"], dict):
                _check_keys(synthetic["covariance"], _COV_KEYS, "config.data.synthetic.covariance")
        if "solver" in obj:
            _check_keys(obj["solver"], _SOLVER_KEYS, "config.solver")
        estimator = obj.get("estimator")
        if estimator is not None:
            _check_estimator(estimator, "config.estimator")
        estimators = obj.get("estimators", [])
        for i, block in enumerate(estimators):
            _check_estimator(block, f"config.estimators[{i}]")
        return cls(
            seed=obj.get("seed"),
            csv_path=csv_path,
            synthetic=synthetic,
            estimator=estimator,
            estimators=list(estimators),
            solver=dict(obj.get("solver", {})),
            reps=obj.get("reps"),
            output=obj.get("output"),
        )

    def to_dict(self) -> dict:
        out = {}
        if self.seed is not None:
            out["seed"] = self.seed
        out["data"] = {"csv": self.csv_path} if self.csv_path is not None else {"synthetic": self.synthetic}
        if self.estimator is not None:
            out["estimator"] = self.estimator
        if self.estimators:
            out["estimators"] = self.estimators
        if self.solver:
            out["solver"] = self.solver
        if self.reps is not None:
            out["reps"] = self.reps
        if self.output is not None:
            out["output"] = self.output
        return out


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(raw)


def _resolve_covariance(cov_obj) -> np.ndarray:
    if isinstance(cov_obj, dict):
        model = synth.CovModel(
            kind=cov_obj["kind"],
            d=int(cov_obj["d"]),
            rank=int(cov_obj.get("rank", 1)),
            spike=float(cov_obj.get("spike", 1.0)),
            rho=float(cov_obj.get("rho", 0.0)),
            alpha=float(cov_obj.get("alpha", 2.0)),
        )
        return synth.build_covariance(model)
    return np.asarray(cov_obj, dtype=float)


def _synthetic_spec(cfg: ExperimentConfig) -> tuple:
    syn = dict(cfg.synthetic)
    cov_arr = _resolve_covariance(syn["covariance"])
    d = cov_arr.shape[0]
    mean = np.asarray(syn.get("mean", np.zeros(d)), dtype=float)
    if mean.ndim == 0:
        mean = np.full(d, float(mean))
    spec_dict = {
        "family": syn["family"],
        "n": int(syn["n"]),
        "mean": mean,
        "covariance": cov_arr,
        "dof": float(syn.get("dof", 0.0)),
        "lognormal_scale": float(syn.get("lognormal_scale", 1.0)),
        "eps": float(syn.get("eps", 0.0)),
        "outlier_scale": float(syn.get("outlier_scale", 0.0)),
    }
    return spec_dict, cov_arr


def _load_data(cfg: ExperimentConfig) -> Dataset:
    if cfg.csv_path is not None:
        return synth.load_dataset_csv(cfg.csv_path)
    spec_dict, _ = _synthetic_spec(cfg)
    if cfg.seed is None:
        raise ConfigError("synthetic data requires a 'seed'")
    spec = synth.DistributionSpec(
        family=spec_dict["family"],
        mean=spec_dict["mean"],
        covariance=spec_dict["covariance"],
        seed=int(cfg.seed),
        dof=spec_dict["dof"],
        lognormal_scale=spec_dict["lognormal_scale"],
        eps=spec_dict["eps"],
        outlier_scale=spec_dict["outlier_scale"],
    )
    return synth.sample(spec, spec_dict["n"])


def _solver_from_cfg(cfg: ExperimentConfig) -> SolverOptions:
    s = cfg.solver
    return SolverOptions(
        max_iter=int(s.get("max_iter", 500)),
        grad_tol=float(s.get("grad_tol", 1e-8)),
        init=s.get("init", "zero"),
    )


def write_matrix_csv(path: str, matrix: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in np.atleast_2d(matrix):
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def cmd_estimate(cfg: ExperimentConfig, strict: bool = False) -> int:
    if cfg.estimator is None:
        raise ConfigError("estimate requires an 'estimator' block")
    if cfg.output is None:
        raise ConfigError("estimate requires an 'output' path")
    data = _load_data(cfg)
    opts = _solver_from_cfg(cfg)
    matrix, _, info = mc.run_estimator_block(cfg.estimator, data, opts)
    write_matrix_csv(cfg.output, matrix)
    diag_path = cfg.output + ".diag"
    with open(diag_path, "w") as fh:
        fh.write(f"estimator={cfg.estimator['name']}\n")
        fh.write(f"iterations={info['iterations']}\n")
        fh.write(f"grad_residual={info['grad_residual']:.17g}\n")
        fh.write(f"theta={info['theta']:.17g}\n")
        fh.write(f"k={info['k']}\n")
        fh.write(f"converged={'true' if info['converged'] else 'false'}\n")
    if strict and not info["converged"]:
        print("error: solver did not converge (--strict)", file=sys.stderr)
        return 4
    return 0


def cmd_compare(cfg: ExperimentConfig, threads: Optional[int] = None, strict: bool = False) -> int:
    if cfg.synthetic is None:
        raise ConfigError("compare requires synthetic data (truth must be known)")
    if not cfg.estimators:
        raise ConfigError("compare requires a non-empty 'estimators' list")
    if cfg.reps is None or cfg.reps < 1:
        raise ConfigError(f"compare requires reps >= 1, got {cfg.reps}")
    if cfg.seed is None:
        raise ConfigError("compare requires a 'seed'")
    if cfg.output is None:
        raise ConfigError("compare requires an 'output' path")
    spec_dict, _ = _synthetic_spec(cfg)
    task = mc.make_task(spec_dict, cfg.estimators, cfg.seed, cfg.reps, cfg.solver)
    rows = mc.run_compare(task, threads=threads)
    any_nonconverged = any(not r["converged"] for r in rows)
    with open(cfg.output, "w") as fh:
        fh.write("# schema=1\n")
        fh.write("rep,seed,estimator,error_op,error_frob,iterations,converged,wall_time_ms\n")
        for r in rows:
            fh.write(
                f"{r['rep']},{r['seed']},{r['estimator']},{r['error_op']:.17g},"
                f"{r['error_frob']:.17g},{r['iterations']},"
                f"{'true' if r['converged'] else 'false'},{r['wall_time_ms']:.3f}\n"
            )
        for name, s in mc.summarize(rows).items():
            fh.write(
                f"# summary estimator={name} mean_op={s['mean_op']:.17g} "
                f"median_op={s['median_op']:.17g} q95_op={s['q95_op']:.17g}\n"
            )
    if any_nonconverged:
        if strict:
            print("error: at least one rep did not converge (--strict)", file=sys.stderr)
            return 4
        print("warning: at least one rep did not converge", file=sys.stderr)
    return 0


def selfcheck_invariants() -> list:
    """Named invariant checks: (name, passed, detail)."""
    results = []
    rng = np.random.default_rng(20240817)

    xs = np.linspace(-5.0, 5.0, 10_000)
    psi_vals = np.asarray([matfun.psi_scalar(x) for x in xs])
    lo = -np.log(1.0 - xs + xs * xs)
    hi = np.log(1.0 + xs + xs * xs)
    ok = bool(np.all(psi_vals >= lo) and np.all(psi_vals <= hi))
    results.append(("psi-sandwich", ok, "psi within [-log(1-x+x^2), log(1+x+x^2)]"))

    ok = True
    for _ in range(60):
        d = int(rng.integers(2, 7))
        a = rng.standard_normal((d, d))
        b = rng.standard_normal((d, d))
        a = (a + a.T) / 2
        b = (b + b.T) / 2
        lhs = matfun.op_norm(matfun.psi_mat(a) - matfun.psi_mat(b))
        if lhs > matfun.op_norm(a - b) + 1e-9:
            ok = False
            break
    results.append(("psi-lipschitz", ok, "operator-norm Lipschitz constant 1"))

    ok = True
    for _ in range(40):
        d1, d2 = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        a = rng.standard_normal((d1, d2))
        smax = float(np.linalg.svd(a, compute_uv=False)[0]) if min(d1, d2) else 0.0
        if abs(matfun.op_norm(matfun.dilation(a)) - smax) > 1e-10 * max(1.0, smax):
            ok = False
            break
    results.append(("dilation-isometry", ok, "||D(A)|| equals the top singular value"))

    ok = True
    for _ in range(10):
        d = int(rng.integers(1, 4))
        n = int(rng.integers(4, 9))
        data = Dataset(samples=rng.standard_normal((n, d)))
        u = ustat.u_statistic(data, cov.pairwise_kernel(d))
        s = cov.sample_covariance(data)
        if np.abs(u - s).max() > 1e-10:
            ok = False
            break
    results.append(("ustat-identity", ok, "pairwise U-statistic equals sample covariance"))
    return results


def cmd_selfcheck() -> int:
    failures = []
    for name, ok, detail in selfcheck_invariants():
        print(f"{name}: {'PASS' if ok else 'FAIL'} ({detail})")
        if not ok:
            failures.append(name)
    if failures:
        print("selfcheck failed: " + ", ".join(failures), file=sys.stderr)
        return 1
    return 0


def _thread_count(args) -> Optional[int]:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("ROBUST_USTAT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"ROBUST_USTAT_THREADS is not an integer: {env!r}")
    return None


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="robust-ustat",
        description="Heavy-tail-tolerant matrix and covariance estimation",
    )
    parser.add_argument("--threads", type=int, default=None, help="worker pool size (default: all cores)")
    parser.add_argument("--strict", action="store_true", help="treat non-convergence as an error")
    sub = parser.add_subparsers(dest="command", required=True)
    p_est = sub.add_parser("estimate", help="run one estimator, write the matrix and diagnostics")
    p_est.add_argument("--config", required=True)
    p_cmp = sub.add_parser("compare", help="seeded Monte Carlo comparison of estimators")
    p_cmp.add_argument("--config", required=True)
    sub.add_parser("selfcheck", help="run the embedded invariant suite")

    args = parser.parse_args(argv)
    try:
        if args.command == "selfcheck":
            return cmd_selfcheck()
        cfg = load_config(args.config)
        if args.command == "estimate":
            return cmd_estimate(cfg, strict=args.strict)
        return cmd_compare(cfg, threads=_thread_count(args), strict=args.strict)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except RobustUstatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

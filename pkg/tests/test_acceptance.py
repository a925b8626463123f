"""Acceptance suite: one test per criterion, one printed PASS/FAIL line each.

The Monte Carlo experiments state their design choices (t, tolerances,
oracle moments) inline; population quantities for synthetic models use the
gaussian identities E(H - EH)^2 = tr(S) S + S^2 for the pairwise kernel.
Run with `pytest tests/test_acceptance.py -s` to see the lines as they pass.
"""

import math
import time

import numpy as np
import pytest

from robust_ustat import (
    Dataset,
    KernelSpec,
    LepskiConfig,
    RectKernelSpec,
    RobustParams,
    SolverOptions,
    descent_diagnostics,
    dilation,
    gradient,
    lepski_select,
    objective,
    op_norm,
    psi_mat,
    psi_scalar,
    solve,
    solve_rectangular,
    theta_from_sigma,
    u_statistic,
    xi_bound,
)
from robust_ustat import mc
from robust_ustat.covariance import (
    estimate_moment_proxies,
    frobenius_oracle_rhs,
    pairwise_kernel,
    sample_covariance,
    sigma_proxy_linear,
    threshold_eigs,
)
from robust_ustat.matfun import frob_norm
from robust_ustat.robust import LEPSKI_COMPARISON  # noqa: F401  (sanity: constant exists)
from robust_ustat.synth import CovModel, DistributionSpec, build_covariance, build_mask, sample
from robust_ustat.ustat import block_average


def report(name: str, ok: bool, detail: str, elapsed: float, budget: float):
    within = elapsed <= budget
    line = f"{name}: {'PASS' if ok and within else 'FAIL'} ({detail}; {elapsed:.1f}s of {budget:.0f}s budget)"
    print(line)
    assert ok, line
    assert within, line


def rand_sym(rng, d, scale=1.0):
    a = rng.standard_normal((d, d)) * scale
    return (a + a.T) / 2


def test_a1_psi_sandwich():
    t0 = time.monotonic()
    xs = np.linspace(-5.0, 5.0, 10_000)
    vals = psi_scalar(xs)
    lo = -np.log(1.0 - xs + xs * xs)
    hi = np.log(1.0 + xs + xs * xs)
    ok = bool(np.all(vals >= lo) and np.all(vals <= hi))
    report("A1 psi-sandwich", ok, "10^4 grid points, zero tolerance", time.monotonic() - t0, 1.0)


def test_a2_psi_operator_lipschitz():
    t0 = time.monotonic()
    rng = np.random.default_rng(2001)
    ok = True
    for _ in range(1000):
        d = int(rng.integers(2, 9))
        a = rand_sym(rng, d, 2.0)
        b = rand_sym(rng, d, 2.0)
        pa, pb = psi_mat(a), psi_mat(b)
        if op_norm(pa - pb) > op_norm(a - b) + 1e-9 or frob_norm(pa - pb) > frob_norm(a - b) + 1e-9:
            ok = False
            break
    report("A2 psi-lipschitz", ok, "1000 pairs, both norms, slack 1e-9", time.monotonic() - t0, 10.0)


def test_a3_gradient_matches_finite_differences():
    t0 = time.monotonic()
    rng = np.random.default_rng(2002)
    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 6))
        n = int(rng.integers(4, 13))
        data = Dataset(samples=rng.standard_normal((n, d)) * float(rng.uniform(0.5, 2.0)))
        kern = pairwise_kernel(d)
        params = RobustParams(theta=float(rng.uniform(0.1, 0.9)), t=1.0, k=n // 2, sigma=1.0)
        u = rand_sym(rng, d)
        g = gradient(data, kern, u, params)
        h = 1e-6
        fd = np.zeros((d, d))
        for i in range(d):
            for j in range(i, d):
                e = np.zeros((d, d))
                e[i, j] = e[j, i] = 1.0
                fd_val = (
                    objective(data, kern, u + h * e, params)
                    - objective(data, kern, u - h * e, params)
                ) / (2 * h)
                # directional derivative along a symmetric basis element
                inner = g[i, j] if i == j else 2 * g[i, j]
                fd[i, j] = fd[j, i] = fd_val - inner
        scale = max(np.abs(g).max(), 1e-8)
        worst = max(worst, np.abs(fd).max() / scale)
    ok = worst <= 1e-6
    report("A3 gradient-fd", ok, f"50 instances, worst rel err {worst:.2e}", time.monotonic() - t0, 30.0)


def test_a4_stationarity_and_descent():
    t0 = time.monotonic()
    rng = np.random.default_rng(2003)
    ok = True
    detail = "stationarity, monotone trace, sublinear descent bound on 100 instances"
    for trial in range(100):
        d = int(rng.integers(1, 5))
        n = int(rng.integers(4, 11))
        data = Dataset(samples=rng.standard_normal((n, d)) * float(rng.uniform(0.5, 3.0)))
        kern = pairwise_kernel(d)
        theta = float(rng.uniform(0.05, 0.6))
        params = RobustParams(theta=theta, t=1.0, k=n // 2, sigma=1.0)
        # saturated instances converge slowly; the cap just needs to be generous
        opts = SolverOptions(grad_tol=1e-8, max_iter=20_000)
        rep = solve(data, kern, params, opts)
        if not rep.converged:
            ok, detail = False, f"instance {trial} did not converge"
            break
        if rep.grad_residual > opts.grad_tol * max(1.0, frob_norm(rep.estimate)):
            ok, detail = False, f"instance {trial} residual above tolerance"
            break
        trace = rep.objective_trace
        slack = 1e-12 * max(1.0, abs(trace[0]))
        if any(b > a + slack for a, b in zip(trace, trace[1:])):
            ok, detail = False, f"instance {trial} trace not nonincreasing"
            break
        holds, _ = descent_diagnostics(rep, np.zeros((d, d)), rep.estimate)
        if not holds:
            ok, detail = False, f"instance {trial} violates the descent bound"
            break
    report("A4 stationarity-descent", ok, detail, time.monotonic() - t0, 60.0)


def _gaussian_pairwise_sigma_star(sig):
    """sqrt(||tr(S) S + S^2||): matrix variance of the pairwise kernel under gaussian data."""
    m = np.trace(sig) * sig + sig @ sig
    return math.sqrt(op_norm(m))


def test_a5_heavy_tail_robustness():
    t0 = time.monotonic()
    sig = build_covariance(CovModel(kind="spiked", d=5, rank=1, spike=4.0))
    # Monte Carlo kurtosis of linear forms from a large seeded pilot sample
    pilot_t = sample(
        DistributionSpec(family="student_t", mean=np.zeros(5), covariance=sig, seed=515151, dof=4.2),
        200_000,
    )
    k_mc_t = estimate_moment_proxies(pilot_t, directions_per_dim=20, seed=0).kurtosis_K
    sigma_t = sigma_proxy_linear(k_mc_t, sig)
    solver = {"grad_tol": 1e-6, "init": "ustat"}

    task_i = mc.make_task(
        {"family": "student_t", "n": 300, "covariance": sig, "dof": 4.2},
        [{"name": "sample"}, {"name": "robust", "sigma": sigma_t, "t": 3.0}],
        seed=900401,
        reps=100,
        solver=solver,
    )
    rows_i = mc.run_compare(task_i)
    summary_i = mc.summarize(rows_i)
    ok_i = summary_i["robust"]["mean_op"] <= summary_i["sample"]["mean_op"]

    pilot_g = sample(
        DistributionSpec(family="gaussian", mean=np.zeros(5), covariance=sig, seed=525252),
        200_000,
    )
    k_mc_g = estimate_moment_proxies(pilot_g, directions_per_dim=20, seed=0).kurtosis_K
    sigma_g = sigma_proxy_linear(k_mc_g, sig)
    task_ii = mc.make_task(
        {
            "family": "contaminated_gaussian",
            "n": 300,
            "covariance": sig,
            "eps": 0.05,
            "outlier_scale": 50.0,
        },
        [{"name": "sample"}, {"name": "robust", "sigma": sigma_g, "t": 3.0}],
        seed=900402,
        reps=100,
        solver=solver,
    )
    rows_ii = mc.run_compare(task_ii)
    summary_ii = mc.summarize(rows_ii)
    ok_ii = summary_ii["robust"]["q95_op"] <= 0.5 * summary_ii["sample"]["q95_op"]

    detail = (
        f"t4.2 mean {summary_i['robust']['mean_op']:.3f} vs {summary_i['sample']['mean_op']:.3f}; "
        f"contaminated q95 {summary_ii['robust']['q95_op']:.3f} vs 0.5*{summary_ii['sample']['q95_op']:.3f}"
    )
    report("A5 heavy-tail-robustness", ok_i and ok_ii, detail, time.monotonic() - t0, 300.0)


def test_a6_rate_scaling():
    t0 = time.monotonic()
    sig = np.eye(5)
    sigma_star = _gaussian_pairwise_sigma_star(sig)
    solver = {"grad_tol": 1e-6, "init": "ustat"}
    medians = {}
    for n in (200, 800):
        task = mc.make_task(
            {"family": "gaussian", "n": n, "covariance": sig},
            [{"name": "robust", "sigma": sigma_star, "t": 2.0}],
            seed=900500 + n,
            reps=50,
            solver=solver,
        )
        rows = mc.run_compare(task)
        medians[n] = float(np.median([r["error_op"] for r in rows]))
    ratio = medians[200] / medians[800]
    ok = 1.6 <= ratio <= 2.6
    report(
        "A6 rate-scaling",
        ok,
        f"median errors {medians[200]:.4f} (n=200) / {medians[800]:.4f} (n=800) = {ratio:.2f}",
        time.monotonic() - t0,
        300.0,
    )


def test_a7_lepski_adaptivity():
    t0 = time.monotonic()
    sig = np.eye(5)
    sigma_star = _gaussian_pairwise_sigma_star(sig)
    m = np.trace(sig) * sig + sig @ sig
    trace_bound = float(np.trace(m))  # weakened-form admissibility, oracle trace
    gamma = 2.0
    solver = {"grad_tol": 1e-6, "init": "ustat"}
    task = mc.make_task(
        {"family": "gaussian", "n": 400, "covariance": sig},
        [
            {
                "name": "robust-adaptive",
                "sigma_min": sigma_star / 10,
                "gamma": gamma,
                "t": 0.3,
                "trace_bound": trace_bound,
                "j_max": 8,
            },
            {"name": "robust", "sigma": sigma_star, "t": 0.3},
        ],
        seed=900600,
        reps=100,
        solver=solver,
    )
    rows = mc.run_compare(task)
    adaptive = [r for r in rows if r["estimator"] == "robust-adaptive"]
    oracle = [r for r in rows if r["estimator"] == "robust"]
    wins = sum(
        a["error_op"] <= 3 * gamma * o["error_op"] for a, o in zip(adaptive, oracle)
    )
    finite = all(math.isfinite(a["j_star"]) for a in adaptive)
    ok = wins >= 90 and finite
    report(
        "A7 lepski-adaptivity",
        ok,
        f"{wins}/100 reps within 3*gamma of oracle, j_star finite={finite}",
        time.monotonic() - t0,
        600.0,
    )


def test_a8_dilation_path_consistency():
    t0 = time.monotonic()
    rng = np.random.default_rng(2008)
    ok = True
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(2, 4))
        n = int(rng.integers(6, 11))
        data = Dataset(samples=rng.standard_normal((n, d)))
        grad_tol = 1e-10
        opts = SolverOptions(grad_tol=grad_tol)
        params = RobustParams(theta=float(rng.uniform(0.2, 0.6)), t=1.0, k=n // 2, sigma=1.0)
        base = pairwise_kernel(d)
        rect = RectKernelSpec(arity=2, rows=d, cols=d, evaluate=base.evaluate, evaluate_batch=base.evaluate_batch)
        block = solve_rectangular(data, rect, params, opts)
        sym = solve(data, base, params, opts).estimate
        err = np.abs(block - sym).max()
        tol = 10 * grad_tol * max(1.0, frob_norm(sym))
        worst = max(worst, err / tol)
        if err > tol:
            ok = False
            break
    report(
        "A8 dilation-consistency",
        ok,
        f"20 instances, worst err/tol {worst:.2f} at 10x grad_tol",
        time.monotonic() - t0,
        60.0,
    )


def test_a9_frobenius_oracle_inequality():
    t0 = time.monotonic()
    d = 20
    sig = np.zeros((d, d))
    sig[0, 0] = 5.0
    sig[1, 1] = 2.5
    sigma_star = _gaussian_pairwise_sigma_star(sig)
    m = np.trace(sig) * sig + sig @ sig
    rh = float(np.trace(m)) / op_norm(m)
    gamma = 2.0
    sigma_min = sigma_star / 2
    t_conf = 0.9
    k = 500 // 2
    kurt = 3.0  # gaussian linear forms
    r_sig = float(np.trace(sig)) / op_norm(sig)
    xi = xi_bound(sigma_star, sigma_min, gamma)
    tau = gamma * 138.0 * math.sqrt(kurt) * op_norm(sig) * math.sqrt(r_sig * (t_conf + xi) / k)
    rhs = frobenius_oracle_rhs(sig, sig, tau)  # oracle candidate S = Sigma

    task = mc.make_task(
        {"family": "gaussian", "n": 500, "covariance": sig},
        [
            {
                "name": "thresholded",
                "tau": tau,
                "base": {
                    "name": "robust-adaptive",
                    "sigma_min": sigma_min,
                    "gamma": gamma,
                    "t": t_conf,
                    "rh_bound": rh,
                    "j_max": 8,
                },
            }
        ],
        seed=900900,
        reps=100,
        solver={"grad_tol": 1e-6, "init": "ustat"},
    )
    rows = mc.run_compare(task)
    hits = sum(r["error_frob"] ** 2 <= rhs for r in rows)
    finite = all(math.isfinite(r["j_star"]) for r in rows)
    ok = hits >= 95 and finite
    report(
        "A9 frobenius-oracle",
        ok,
        f"{hits}/100 reps satisfy LHS <= {rhs:.1f} (tau={tau:.1f}), j_star finite={finite}",
        time.monotonic() - t0,
        600.0,
    )


def test_a10_masked_estimation():
    t0 = time.monotonic()
    d = 20
    sig = build_covariance(CovModel(kind="toeplitz", d=d, rho=0.6))
    mask = build_mask("banded", d, 2)
    lam_max = op_norm(sig)
    # gaussian oracle moments: E<v,Y>^4 = 3 (v' S v)^2
    nu4 = (3.0 * lam_max**2) ** 0.25
    mu4 = (3.0 * float(np.max(np.diag(sig))) ** 2) ** 0.25
    col_norm = float(np.max(np.linalg.norm(mask, axis=0)))
    delta = math.sqrt(2.0) * col_norm * nu4 * mu4
    sigma = sigma_proxy_linear(3.0, sig)
    task = mc.make_task(
        {"family": "gaussian", "n": 500, "covariance": sig},
        [
            {"name": "masked", "delta": delta, "t": 1.0, "mask": {"kind": "banded", "b": 2}},
            {"name": "robust", "sigma": sigma, "t": 1.0},
        ],
        seed=901000,
        reps=50,
        solver={"grad_tol": 1e-4, "init": "ustat"},
    )
    rows = mc.run_compare(task)
    med_masked = float(np.median([r["error_op"] for r in rows if r["estimator"] == "masked"]))
    med_plain = float(np.median([r["error_op"] for r in rows if r["estimator"] == "robust"]))
    ok = med_masked <= med_plain
    report(
        "A10 masked-estimation",
        ok,
        f"median masked {med_masked:.4f} <= unmasked {med_plain:.4f} (Delta={delta:.2f}, sigma={sigma:.2f})",
        time.monotonic() - t0,
        600.0,
    )


def test_a11_exact_identities():
    t0 = time.monotonic()
    rng = np.random.default_rng(2011)

    ustat_ok = True
    for _ in range(100):
        d = int(rng.integers(1, 7))
        n = int(rng.integers(2, 31))
        data = Dataset(samples=rng.standard_normal((n, d)) * 10.0 ** rng.integers(-2, 3))
        u = u_statistic(data, pairwise_kernel(d))
        if np.abs(u - sample_covariance(data)).max() > 1e-10:
            ustat_ok = False
            break

    dilation_ok = True
    for _ in range(50):
        a = rng.standard_normal((int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        smax = math.sqrt(max(float(np.linalg.eigvalsh(a.T @ a)[-1]), 0.0))
        if abs(op_norm(dilation(a)) - smax) > 1e-10 * max(1.0, smax):
            dilation_ok = False
            break

    perm_ok = True
    import itertools

    kern = KernelSpec(
        arity=2, output_dim=1, evaluate=lambda x, y: np.array([[(x[0] - y[0]) ** 2 / 2]])
    )
    for n in (2, 3, 4, 5, 6):
        data = Dataset(samples=rng.standard_normal((n, 1)))
        acc = np.zeros((1, 1))
        perms = list(itertools.permutations(range(n)))
        for perm in perms:
            acc += block_average(data, kern, perm)
        if np.abs(acc / len(perms) - u_statistic(data, kern)).max() > 1e-10:
            perm_ok = False
            break

    ok = ustat_ok and dilation_ok and perm_ok
    report(
        "A11 exact-identities",
        ok,
        f"ustat=sample-cov {ustat_ok}, dilation isometry {dilation_ok}, permutation identity {perm_ok}",
        time.monotonic() - t0,
        30.0,
    )

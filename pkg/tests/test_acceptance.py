"""Acceptance criteria AC1-AC9, one pass/fail line each (see the terminal summary)."""

import os
import time

import numpy as np
import pytest

from fedmbo.cli import main as cli_main
from fedmbo.constants import derive_constants, measure_family_constants
from fedmbo.driver import ProblemConfig, RunConfig, build_family, family_constants, fedmbo_run, lyapunov
from fedmbo.experiments import (
    SweepSpec,
    compare_inner,
    estimator_stats,
    paired_increase_tests,
    run_sweep,
    sweep_heterogeneity,
    sweep_speedup,
)
from fedmbo.hypergradient import exact_surrogate_gradient, expected_phe, phe_chains
from fedmbo.inner_solver import InnerConfig, contraction_bound, minibatch_sgd_lower
from fedmbo.problems import QuadraticFamily, exact_hypergradient, generate_quadratic_family, phi_value

from conftest import fd_gradient

SEED = 0


def random_family(rng, seed, max_dim=4, max_clients=6):
    p = int(rng.integers(1, max_dim + 1))
    q = int(rng.integers(1, max_dim + 1))
    mu = float(rng.uniform(0.3, 1.0))
    ell = mu + float(rng.uniform(0.5, 4.0))
    return generate_quadratic_family(int(rng.integers(2, max_clients + 1)), p, q,
                                     int(rng.integers(2, max_clients + 1)), mu, ell,
                                     float(rng.uniform(0.0, 2.0)), seed=seed)


def test_ac1_hypergradient_correctness(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(SEED)
    worst_fd = worst_sur = 0.0
    for f in range(100):
        fam = random_family(rng, 1000 + f, max_dim=16)
        x = rng.uniform(-1, 1, fam.p)
        g = exact_hypergradient(fam, x)
        fd = fd_gradient(lambda z: phi_value(fam, z), x)
        worst_fd = max(worst_fd, float(np.linalg.norm(g - fd) / np.linalg.norm(g)))
        sur = exact_surrogate_gradient(fam, x, fam.lower_solution(x))
        worst_sur = max(worst_sur, float(np.linalg.norm(sur - g)))
    secs = time.perf_counter() - start
    acceptance_report("AC1", worst_fd <= 1e-6 and worst_sur <= 1e-10 and secs < 10,
                      f"max FD rel err {worst_fd:.2e} (<=1e-6), surrogate dev {worst_sur:.2e} "
                      f"(<=1e-10), {secs:.1f}s")


def test_ac2_neumann_bias(acceptance_report):
    start = time.perf_counter()
    # scalar worst case: Hessian equal to mu_g = 1, Neumann scale 2, N = 3
    fam = QuadraticFamily.scalar(A=1.0, B=1.0, c=0.0, V=1.0, u=0.0, l_g1=2.0)
    x, y = np.array([0.0]), np.array([1.0])
    got = expected_phe(fam, x, y, 3)[0]
    bias = abs(got - exact_surrogate_gradient(fam, x, y)[0])
    scalar_ok = abs(got + 7 / 8) <= 1e-12 and abs(bias - (1 - 1 / 2) ** 3) <= 1e-12

    rng = np.random.default_rng(SEED)
    # matrix case with known spectrum: Hessian mu*I makes the bias vector closed-form
    matrix_err = 0.0
    for c in range(20):
        q, p = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        mu = float(rng.uniform(0.3, 1.0))
        ell = mu + float(rng.uniform(0.5, 3.0))
        fam = generate_quadratic_family(1, p, q, 1, mu, mu, 0.0, seed=c, noise=0.0)
        x, y = rng.uniform(-1, 1, p), rng.uniform(-1, 1, q)
        N = int(rng.integers(1, 20))
        _, gy = fam.mean_upper_grad(x, y)
        want = np.linalg.norm(fam.mean_cross_xy(x, y) @ gy) * (1 - mu / ell) ** N / mu
        diff = expected_phe(fam, x, y, N, ell) - exact_surrogate_gradient(fam, x, y)
        matrix_err = max(matrix_err, abs(np.linalg.norm(diff) - want) / max(want, 1e-300))

    violations = 0
    for c in range(1000):
        fam = random_family(rng, 5000 + c)
        x, y = rng.uniform(-1, 1, fam.p), rng.uniform(-1, 1, fam.q)
        N = int(rng.integers(1, 30))
        _, gy = fam.mean_upper_grad(x, y)
        bound = (np.linalg.norm(fam.mean_cross_xy(x, y), 2) / fam.mu_g
                 * (1 - fam.mu_g / fam.l_g1) ** N * np.linalg.norm(gy))
        bias = np.linalg.norm(expected_phe(fam, x, y, N) - exact_surrogate_gradient(fam, x, y))
        violations += int(bias > bound)
    secs = time.perf_counter() - start
    acceptance_report("AC2", scalar_ok and matrix_err <= 1e-10 and violations == 0 and secs < 30,
                      f"scalar estimator {got:.15f} (want -0.875), matrix closed-form rel err "
                      f"{matrix_err:.1e}, {violations} bound violations / 1000, {secs:.1f}s")


def test_ac3_phe_unbiased(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(SEED)
    chains = 100_000
    worst = 0.0
    for f in range(10):
        fam = random_family(rng, 9000 + f)
        x, y = rng.uniform(-1, 1, fam.p), rng.uniform(-1, 1, fam.q)
        N = int(rng.integers(2, 10))
        H, _ = phe_chains(fam, x, y, N, np.arange(chains), np.zeros(chains, dtype=np.int64), SEED + f)
        se = H.std(axis=0, ddof=1) / np.sqrt(chains)
        z = np.abs(H.mean(axis=0) - expected_phe(fam, x, y, N)) / se
        worst = max(worst, float(z.max()))
    secs = time.perf_counter() - start
    acceptance_report("AC3", worst <= 4.0 and secs < 300,
                      f"max |mean - expected| / SE = {worst:.2f} (<=4) over 10 families x "
                      f"{chains} chains, {secs:.1f}s")


def test_ac4_variance_scaling(acceptance_report):
    start = time.perf_counter()
    fam = generate_quadratic_family(10, 3, 4, 10, 1.0, 2.0, 0.0, SEED, noise=0.5)
    x = np.ones(3)
    y = fam.lower_solution(x)
    N = 10
    constants = derive_constants(measure_family_constants(fam), N)
    out = estimator_stats(fam, x, y, N, [1, 2, 4, 8, 16], 10_000, seed=SEED, constants=constants)
    phe, ihgp = out["slopes"]["phe"], out["slopes"]["ihgp"]
    under = all(r["variance"] <= r["variance_bound"] for r in out["rows"])
    secs = time.perf_counter() - start
    ok = -1.15 <= phe <= -0.85 and under and ihgp - phe >= 0.3 and secs < 600
    acceptance_report("AC4", ok,
                      f"PHE slope {phe:.3f} in [-1.15,-0.85], IHGP slope {ihgp:.3f} "
                      f"(shallower by {ihgp - phe:.2f} >= 0.3), all variances <= "
                      f"sigma_tilde^2/n: {under}, {secs:.1f}s")


def test_ac5_inner_contraction(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    failures = 0
    reps = 200
    for f in range(20):
        fam = random_family(rng, f, max_dim=4, max_clients=7)
        x, y0 = rng.uniform(-1, 1, fam.p), rng.uniform(-1, 1, fam.q)
        ys = fam.lower_solution(x)
        base = measure_family_constants(fam, R=10.0, probes=[(x, y0), (x, ys)])
        n, S = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        beta = float(rng.uniform(0.2, 1.0)) / (2 * base.l_g1)
        err0 = float(np.sum((y0 - ys) ** 2))
        for T in (1, 5, 10):
            errs = np.array([
                np.sum((minibatch_sgd_lower(fam, x, y0, InnerConfig(T, S, n, beta), f, k).y - ys) ** 2)
                for k in range(reps)])
            bound = contraction_bound(err0, [beta] * T, base.mu_g, base.sigma_g1_2, base.sigma_g_2, n, S)
            lower = errs.mean() - 3 * errs.std(ddof=1) / np.sqrt(reps)
            worst = max(worst, lower / bound)
            failures += int(lower > bound)
    secs = time.perf_counter() - start
    acceptance_report("AC5", failures == 0 and secs < 300,
                      f"{failures} violations over 20 families x T in {{1,5,10}}; worst "
                      f"(mean - 3SE)/bound = {worst:.3f}, {secs:.1f}s")


def test_ac6_deterministic_descent(acceptance_report):
    start = time.perf_counter()
    worst = -np.inf
    for seed in range(3):
        for N in (1, 3, 10):
            prob = ProblemConfig(m=1, p=3, q=3, samples_per_client=1, sigma_het=0.0, noise=0.0, seed=seed)
            rec = fedmbo_run(RunConfig(problem=prob, K=500, T=5, N=N, n=2, x0_noise=3.0, seed=seed))
            W = lyapunov(rec)
            slack = rec.column("alpha")[:-1] * rec.header["constants"]["bias_proof"] ** 2 + 1e-12
            worst = max(worst, float(np.max(np.diff(W) - slack)))
    secs = time.perf_counter() - start
    acceptance_report("AC6", worst <= 0 and secs < 10,
                      f"max (W[k+1] - W[k] - alpha_k b^2 - 1e-12) = {worst:.2e} (<=0) over "
                      f"9 runs of K=500, {secs:.1f}s")


def test_ac7_linear_speedup(acceptance_report):
    start = time.perf_counter()
    prob = ProblemConfig(m=10, p=1, q=4, samples_per_client=10, mu_g=1.0, l_g1=2.0,
                         sigma_het=1.0, noise=0.5, cross_scale=4.0)
    fam = build_family(prob)
    constants = derive_constants(family_constants(fam, 10.0, 8), N=10, T=20)
    base = RunConfig(problem=prob, K=1, T=20, N=10, alpha_hat3=2.83 * constants.alpha_hat1,
                     x0_mode="optimum", y0_mode="exact", seed=SEED)
    out = sweep_speedup(base, [1, 2, 4, 8, 16], 30, 0.2, [2048, 4096, 8192, 16384])
    slope = out["slope"]
    secs = time.perf_counter() - start
    table = ", ".join(f"n={r['n']}: {r['K_eps']:.0f}" if r["K_eps"] else f"n={r['n']}: censored"
                      for r in out["table"])
    ok = slope is not None and -1.3 <= slope <= -0.7 and secs < 1200
    slope_text = "undefined" if slope is None else f"{slope:.3f}"
    acceptance_report("AC7", ok, f"K(eps) slope {slope_text} in [-1.3,-0.7]; {table}; {secs:.0f}s")


def test_ac8_qualitative(acceptance_report):
    start = time.perf_counter()
    prob = ProblemConfig(m=10, p=4, q=4, samples_per_client=10, mu_g=1.0, l_g1=4.0,
                         sigma_het=1.0, noise=0.5)
    base = RunConfig(problem=prob, K=200, T=5, N=10, n=4, alpha=0.05, beta=0.1,
                     x0_mode="optimum", y0_mode="exact", seed=SEED)

    het = sweep_heterogeneity(base, [0.0, 0.5, 1.0, 2.0], 30, window=100)
    p_het = max(t["p_value"] for t in het["tests"])

    part = run_sweep(SweepSpec("n", (16, 8, 4, 2), 30, base, window=100))
    p_part = max(t["p_value"] for t in
                 paired_increase_tests(np.log(part.metric_matrix("final_stationarity"))))

    prob_c = ProblemConfig(m=10, p=1, q=4, samples_per_client=10, mu_g=1.0, l_g1=4.0, sigma_het=5.0,
                           hess_het=1.0, hess_margin=0.5, noise=0.1, upper_het=0.0)
    fam = build_family(prob_c)
    x_star = fam.minimizer()
    h = 1e-4
    curvature = float((fam.hypergradient(x_star + h) - fam.hypergradient(x_star - h))[0] / (2 * h))
    x0 = x_star + np.sqrt(0.2) / curvature
    base_c = RunConfig(problem=prob_c, K=600, T=5, T_local=5, N=10, n=4, alpha=0.05, beta=0.12,
                       x0=tuple(x0), y0_mode="exact", seed=SEED)
    cmp = compare_inner(base_c, 30, 0.03)

    secs = time.perf_counter() - start
    ok = p_het < 0.05 and p_part < 0.05 and cmp["p_value"] < 0.05 and secs < 1800
    acceptance_report("AC8", ok,
                      f"(a) heterogeneity worst adjacent p={p_het:.1e}; (b) participation worst "
                      f"adjacent p={p_part:.1e}; (c) minibatch wins {cmp['wins']}/{cmp['wins'] + cmp['losses']}"
                      f" sign-test p={cmp['p_value']:.1e}; {secs:.0f}s")


def _tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


def test_ac9_determinism_across_threads(tmp_path, acceptance_report, capsys):
    small = ["problem.m=4", "problem.p=2", "problem.q=3", "problem.samples_per_client=3",
             "algorithm.K=30", "algorithm.T=3", "algorithm.N=4"]
    trees = {}
    for threads in (1, 4):
        run_dir = tmp_path / f"run{threads}"
        sweep_dir = tmp_path / f"sweep{threads}"
        assert cli_main(["run", "--seed", "3", "--threads", str(threads), "--out", str(run_dir), *small]) == 0
        assert cli_main(["sweep", "--seed", "3", "--threads", str(threads), "--out", str(sweep_dir),
                         "--axis", "n", "--values", "1,2,4", "--replicates", "3", *small]) == 0
        trees[threads] = (_tree_bytes(run_dir), _tree_bytes(sweep_dir))
    capsys.readouterr()
    same = trees[1] == trees[4]
    count = sum(len(t) for t in trees[1])
    acceptance_report("AC9", same and count > 0,
                      f"{count} output files byte-identical for --threads 1 and 4: {same}")


pytestmark = pytest.mark.acceptance

"""Fast oracle self-checks bundled behind ``fedmbo verify``."""

import time

import numpy as np

from . import backend
from .hypergradient import expected_phe, exact_surrogate_gradient, phe_chains
from .problems import QuadraticFamily, generate_quadratic_family

FD_STEP = 1e-5


def _fd_gradient(fn, x, h=FD_STEP):
    g = np.zeros_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def check_finite_differences(seed=0, families=10):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for f in range(families):
        fam = generate_quadratic_family(4, 3, 3, 4, 1.0, 3.0, 1.0, seed + f)
        for _ in range(5):
            x = rng.uniform(-2, 2, fam.p)
            g = fam.hypergradient(x)
            err = np.linalg.norm(g - _fd_gradient(fam.phi, x)) / (1 + np.linalg.norm(g))
            worst = max(worst, err)
    return worst <= 1e-6, f"max relative error {worst:.2e} (tol 1e-6)"


def check_surrogate_at_optimum(seed=0, families=10):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for f in range(families):
        fam = generate_quadratic_family(4, 3, 3, 4, 1.0, 3.0, 1.0, seed + 100 + f)
        x = rng.uniform(-2, 2, fam.p)
        g = fam.hypergradient(x)
        worst = max(worst, float(np.linalg.norm(
            exact_surrogate_gradient(fam, x, fam.lower_solution(x)) - g)))
    return worst <= 1e-10, f"max deviation {worst:.2e} (tol 1e-10)"


def check_scalar_bias_equality(l_g1=None):
    """Scalar worst case: Hessian 1, Neumann scale 2, N = 3 gives bias exactly 1/8."""
    ell = 2.0 if l_g1 is None else float(l_g1)
    fam = QuadraticFamily.scalar(A=1.0, B=1.0, c=0.0, V=1.0, u=0.0, l_g1=2.0)
    x, y = np.array([0.0]), np.array([1.0])
    got = expected_phe(fam, x, y, 3, ell)[0]
    bias = abs(got - exact_surrogate_gradient(fam, x, y)[0])
    bound = (1.0 / 1.0) * (1 - 1.0 / ell) ** 3 * 1.0
    ok = abs(got + 7 / 8) <= 1e-12 and abs(bias - bound) <= 1e-12
    return ok, f"expected estimator {got:.6f} (want -0.875), bias {bias:.6f}, bound {bound:.6f}"


def check_bias_bound(l_g1=None, seed=0, cases=200):
    """Truncation bias never exceeds ||J|| ||H^-1|| (1 - mu/l)^N ||grad_y f||."""
    rng = np.random.default_rng(seed)
    violations = 0
    for c in range(cases):
        q = int(rng.integers(1, 5))
        p = int(rng.integers(1, 4))
        mu = float(rng.uniform(0.2, 1.0))
        ell_true = mu + float(rng.uniform(0.0, 3.0))
        fam = generate_quadratic_family(3, p, q, 3, mu, ell_true, 0.5, seed * 1000 + c)
        ell = fam.l_g1 if l_g1 is None else float(l_g1)
        x = rng.uniform(-1, 1, p)
        y = rng.uniform(-1, 1, q)
        N = int(rng.integers(1, 30))
        H = fam.mean_lower_hessian_yy(x, y)
        lam_min = float(np.linalg.eigvalsh(H).min())
        _, gy = fam.mean_upper_grad(x, y)
        bound = (np.linalg.norm(fam.mean_cross_xy(x, y), 2) / lam_min
                 * (1 - lam_min / ell) ** N * np.linalg.norm(gy))
        bias = np.linalg.norm(expected_phe(fam, x, y, N, ell) - exact_surrogate_gradient(fam, x, y))
        if bias > bound * (1 + 1e-9) + 1e-12:
            violations += 1
    return violations == 0, f"{violations} violations in {cases} cases"


def check_unbiased_smoke(seed=0, chains=20000):
    fam = generate_quadratic_family(5, 2, 3, 5, 1.0, 2.0, 1.0, seed + 7)
    x, y = np.ones(2), np.zeros(3)
    H, _ = phe_chains(fam, x, y, 5, np.arange(chains), np.zeros(chains, dtype=np.int64), seed)
    mean = H.mean(axis=0)
    se = H.std(axis=0, ddof=1) / np.sqrt(chains)
    z = float(np.max(np.abs(mean - expected_phe(fam, x, y, 5)) / se))
    return z <= 5.0, f"max |z| = {z:.2f} over {chains} chains (tol 5)"


def check_backends_agree(seed=0):
    if not backend.compiled_available():
        return True, "compiled extension not built; fallback only"
    fam = generate_quadratic_family(5, 2, 3, 5, 1.0, 2.0, 1.0, seed + 11)
    x, y = np.ones(2), np.zeros(3)
    ks, slots = np.arange(500), np.zeros(500, dtype=np.int64)
    a, da = phe_chains(fam, x, y, 6, ks, slots, seed, backend_name="compiled")
    b, db = phe_chains(fam, x, y, 6, ks, slots, seed, backend_name="python")
    err = float(np.max(np.abs(a - b)))
    return err <= 1e-10 and bool(np.all(da == db)), f"max difference {err:.1e}, depths equal {bool(np.all(da == db))}"


def run_checks(l_g1=None, seed=0):
    """Run every check; ``l_g1`` overrides the Neumann scale (negative control)."""
    checks = [
        ("hypergradient_vs_finite_differences", lambda: check_finite_differences(seed)),
        ("surrogate_at_lower_solution", lambda: check_surrogate_at_optimum(seed)),
        ("neumann_bias_scalar_equality", lambda: check_scalar_bias_equality(l_g1)),
        ("neumann_bias_bound", lambda: check_bias_bound(l_g1, seed)),
        ("phe_unbiasedness_smoke", lambda: check_unbiased_smoke(seed)),
        ("compiled_matches_fallback", lambda: check_backends_agree(seed)),
    ]
    results = []
    for name, fn in checks:
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"error: {exc!r}"
        results.append({"check": name, "passed": bool(ok), "detail": detail,
                        "seconds": round(time.perf_counter() - start, 3)})
    return results

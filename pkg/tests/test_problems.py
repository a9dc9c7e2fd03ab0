import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedmbo.problems import (ClientProblem, HyperRepComponent, QuadraticFamily, SampleComponent,
                             exact_hypergradient, exact_lower_solution, family_fingerprint,
                             generate_hyperrep_family, generate_quadratic_family, load_family,
                             lower_grad_y_sample, lower_hvp_yy_sample, lower_jvp_xy_sample,
                             phi_value, save_family, upper_grad_sample)

from conftest import fd_gradient


def scalar_client(A=2.0, B=1.0, c=0.0, V=1.0, u=0.0):
    comp = SampleComponent(np.array([[A]]), np.array([[B]]), np.array([c]), np.array([u]),
                           np.array([[V]]))
    return ClientProblem(0, [comp])


# single-sample oracles

def test_lower_grad_affine():
    assert lower_grad_y_sample(scalar_client(), 2.0, 0.0, 0)[0] == 2.0
    assert lower_grad_y_sample(scalar_client(A=1.0, B=0.0, c=3.0), 0.0, -3.0, 0)[0] == 0.0


def test_lower_grad_vanishes_at_solution(small_family):
    x = np.linspace(-1, 1, small_family.p)
    ys = small_family.lower_solution(x)
    assert np.allclose(small_family.mean_lower_grad_y(x, ys), 0.0, atol=1e-12)


def test_hvp():
    assert lower_hvp_yy_sample(scalar_client(), 0.0, 0.0, 3.0, 0)[0] == 6.0
    assert lower_hvp_yy_sample(scalar_client(), 0.0, 0.0, 0.0, 0)[0] == 0.0
    ell = 3.5
    comp = SampleComponent(ell * np.eye(3), np.zeros((3, 2)), np.zeros(3), np.zeros(3), np.eye(3))
    v = np.array([1.0, -2.0, 0.5])
    assert np.allclose(lower_hvp_yy_sample(ClientProblem(0, [comp]), np.zeros(2), np.zeros(3), v, 0),
                       ell * v)


def test_jvp():
    assert lower_jvp_xy_sample(scalar_client(), 0.0, 0.0, -1.0, 0)[0] == -1.0
    assert lower_jvp_xy_sample(scalar_client(B=0.0), 0.0, 0.0, 5.0, 0)[0] == 0.0
    comp = SampleComponent(np.eye(2), np.eye(2), np.zeros(2), np.zeros(2), np.eye(2))
    v = np.array([0.3, -4.0])
    assert np.allclose(lower_jvp_xy_sample(ClientProblem(0, [comp]), np.zeros(2), np.zeros(2), v, 0), v)


def test_upper_grad():
    gx, gy = upper_grad_sample(scalar_client(), 0.0, -1.0, 0)
    assert gx.tolist() == [0.0] and gy.tolist() == [-1.0]
    gx, gy = upper_grad_sample(scalar_client(u=0.7), 0.0, 0.7, 0)
    assert gx.tolist() == [0.0] and gy.tolist() == [0.0]


def test_hyperrep_sample_residual_gradients():
    client = ClientProblem(0, [HyperRepComponent(np.array([1.0]), 0.0, 0.5, 1)])
    gx, gy = upper_grad_sample(client, np.array([1.0]), np.array([1.0]), 0)
    # residual r = omega * W * a - b = 1, so both partials equal r times the other factor
    assert gx.tolist() == [1.0] and gy.tolist() == [1.0]
    lower = lower_grad_y_sample(client, np.array([1.0]), np.array([1.0]), 0)
    assert lower.tolist() == [1.0 + 0.5]


def test_dimension_mismatch_raises():
    with pytest.raises(ValueError):
        lower_grad_y_sample(scalar_client(), np.zeros(2), 0.0, 0)
    with pytest.raises(ValueError):
        lower_hvp_yy_sample(scalar_client(), 0.0, 0.0, np.zeros(3), 0)
    with pytest.raises(ValueError):
        upper_grad_sample(scalar_client(), 0.0, 0.0, 1)


def test_client_rejects_mixed_dimensions():
    a = SampleComponent(np.eye(2), np.zeros((2, 1)), np.zeros(2), np.zeros(2), np.eye(2))
    b = SampleComponent(np.eye(1), np.zeros((1, 1)), np.zeros(1), np.zeros(1), np.eye(1))
    with pytest.raises(ValueError):
        ClientProblem(0, [a, b])
    with pytest.raises(ValueError):
        ClientProblem(0, [])


# exact references

def test_scalar_lower_solution(scalar_family):
    assert exact_lower_solution(scalar_family, np.array([2.0]))[0] == pytest.approx(-1.0, abs=1e-15)
    assert exact_lower_solution(QuadraticFamily.scalar(c=0.0), np.array([0.0]))[0] == 0.0


def test_two_client_lower_solution():
    fam = QuadraticFamily.from_clients([scalar_client(A=1.0, B=0.0, c=-2.0),
                                        scalar_client(A=3.0, B=0.0, c=2.0)])
    assert exact_lower_solution(fam, np.array([0.7]))[0] == pytest.approx(0.0, abs=1e-15)


def test_scalar_hypergradient(scalar_family):
    x = np.array([2.0])
    assert exact_hypergradient(scalar_family, x)[0] == pytest.approx(0.5, abs=1e-14)
    assert fd_gradient(lambda z: phi_value(scalar_family, z), x)[0] == pytest.approx(0.5, abs=1e-8)
    assert phi_value(scalar_family, x) == pytest.approx(0.5, abs=1e-14)


def test_hypergradient_zero_at_minimizer(small_family):
    assert np.allclose(small_family.hypergradient(small_family.minimizer()), 0.0, atol=1e-10)


def test_decoupled_family_hypergradient():
    fam = generate_quadratic_family(3, 2, 2, 3, 1.0, 2.0, 0.5, seed=4, cross_scale=0.0,
                                    upper_het=0.0, noise=0.0)
    x = np.array([0.3, -0.2])
    gx, _ = fam.mean_upper_grad(x, fam.lower_solution(x))
    assert np.allclose(exact_hypergradient(fam, x), gx)


@given(seed=st.integers(0, 10_000), p=st.integers(1, 5), q=st.integers(1, 5),
       het=st.floats(0, 2))
def test_hypergradient_matches_finite_differences(seed, p, q, het):
    fam = generate_quadratic_family(3, p, q, 3, 0.5, 2.5, het, seed)
    x = np.random.default_rng(seed).uniform(-2, 2, p)
    g = fam.hypergradient(x)
    assert np.linalg.norm(g - fd_gradient(fam.phi, x)) <= 1e-6 * (1 + np.linalg.norm(g))


def test_generic_means_match_closed_forms(small_family):
    fam = small_family
    x, y = np.linspace(-1, 1, fam.p), np.linspace(0.5, -0.5, fam.q)
    from fedmbo.problems import ProblemFamily
    assert np.allclose(ProblemFamily.mean_lower_hessian_yy(fam, x, y), fam.A_mean)
    assert np.allclose(ProblemFamily.mean_cross_xy(fam, x, y), fam.B_mean.T)
    assert np.allclose(ProblemFamily.mean_lower_grad_y(fam, x, y), fam.mean_lower_grad_y(x, y))


# generators

def test_homogeneous_generator_has_identical_clients():
    fam = generate_quadratic_family(4, 2, 3, 5, 1.0, 2.0, 0.0, seed=2)
    x, y = np.ones(2), np.zeros(3)
    G = fam.client_lower_grad_y(x, y)
    assert np.allclose(G, G[0], atol=1e-12)


def test_generator_deterministic():
    a = generate_quadratic_family(4, 2, 3, 5, 1.0, 2.0, 1.0, seed=9)
    b = generate_quadratic_family(4, 2, 3, 5, 1.0, 2.0, 1.0, seed=9)
    assert all(np.array_equal(u, v) for u, v in zip(a.to_arrays().values(), b.to_arrays().values()))
    assert family_fingerprint(a) == family_fingerprint(b)


@given(seed=st.integers(0, 10_000), het=st.floats(0, 3), margin=st.floats(0, 0.5))
def test_generated_spectra_within_bounds(seed, het, margin):
    fam = generate_quadratic_family(4, 2, 3, 4, 1.0, 2.0, het, seed, hess_het=1.0, hess_margin=margin)
    eig = np.linalg.eigvalsh(fam.A)
    assert eig.min() >= 1.0 - 1e-12 and eig.max() <= 2.0 + 1e-12


def test_heterogeneity_preserves_global_problem():
    a = generate_quadratic_family(5, 2, 3, 4, 1.0, 3.0, 0.5, seed=3)
    b = generate_quadratic_family(5, 2, 3, 4, 1.0, 3.0, 2.0, seed=3)
    x = np.array([0.4, -1.0])
    assert np.allclose(a.hypergradient(x), b.hypergradient(x))
    assert not np.allclose(a.A, b.A)


@pytest.mark.parametrize("kw", [dict(mu_g=0.0), dict(sigma_het=-1.0), dict(m=0)])
def test_generator_validates(kw):
    args = dict(m=3, p=2, q=2, samples_per_client=3, mu_g=1.0, l_g1=2.0, sigma_het=1.0, seed=0)
    args.update(kw)
    with pytest.raises(ValueError):
        generate_quadratic_family(**args)


def test_hyperrep_recovers_shrunk_head():
    rho = 0.3
    fam = generate_hyperrep_family(4, 5, 3, 8, rho, 0.0, seed=1, noise=0.0)
    W = fam.W_true
    a = fam.a_train
    Z = a @ W.T
    w = fam.lower_weights
    ridge = np.linalg.solve(Z.T @ (w[:, None] * Z) + rho * np.eye(3), Z.T @ (w * fam.b_train))
    shrunk = np.linalg.solve(Z.T @ (w[:, None] * Z) + rho * np.eye(3), Z.T @ (w[:, None] * Z) @ fam.heads[0])
    ys = fam.lower_solution(W.ravel())
    assert np.allclose(ys, ridge, atol=1e-10)
    assert np.allclose(ys, shrunk, atol=1e-10)


def test_hyperrep_large_ridge_shrinks_to_zero():
    fam = generate_hyperrep_family(3, 4, 2, 6, 1e8, 0.5, seed=2)
    assert np.linalg.norm(fam.lower_solution(fam.default_x0())) < 1e-6


def test_hyperrep_deterministic_and_fd():
    a = generate_hyperrep_family(3, 4, 2, 6, 0.5, 0.5, seed=3)
    b = generate_hyperrep_family(3, 4, 2, 6, 0.5, 0.5, seed=3)
    assert family_fingerprint(a) == family_fingerprint(b)
    x = a.default_x0()
    g = a.hypergradient(x)
    assert np.linalg.norm(g - fd_gradient(a.phi, x)) <= 1e-6 * (1 + np.linalg.norm(g))


def test_hyperrep_oracles_match_finite_differences():
    fam = generate_hyperrep_family(2, 3, 2, 4, 0.5, 1.0, seed=5)
    rng = np.random.default_rng(0)
    x, y, v = rng.standard_normal(fam.p), rng.standard_normal(fam.q), rng.standard_normal(fam.q)
    idx = np.array([1])
    loss = lambda xx, yy: fam.lower_loss(xx, yy[None], idx)[0]
    gy = fam.lower_grad_y(x, y[None], idx)[0]
    assert np.allclose(gy, fd_gradient(lambda z: loss(x, z), y), atol=1e-7)
    hv = fam.lower_hvp_yy(x, y[None], v[None], idx)[0]
    assert np.allclose(hv, fd_gradient(lambda z: fam.lower_grad_y(x, z[None], idx)[0] @ v, y), atol=1e-6)
    jv = fam.lower_jvp_xy(x, y[None], v[None], idx)[0]
    assert np.allclose(jv, fd_gradient(lambda z: fam.lower_grad_y(z, y[None], idx)[0] @ v, x), atol=1e-6)


def test_snapshot_roundtrip(tmp_path, small_family):
    path = tmp_path / "family.npz"
    save_family(small_family, path)
    loaded = load_family(path)
    assert family_fingerprint(loaded) == family_fingerprint(small_family)
    x = np.ones(small_family.p)
    assert np.array_equal(loaded.hypergradient(x), small_family.hypergradient(x))

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedmbo import backend
from fedmbo.errors import ConfigError
from fedmbo.inner_solver import (InnerConfig, check_beta, contraction_bound, local_sgd_lower,
                                 minibatch_sgd_lower)
from fedmbo.problems import QuadraticFamily, generate_quadratic_family

from test_problems import scalar_client

BACKENDS = ["python"] + (["compiled"] if backend.compiled_available() else [])


@pytest.mark.parametrize("be", BACKENDS)
def test_scalar_first_step(scalar_family, be):
    res = minibatch_sgd_lower(scalar_family, [2.0], [0.0], InnerConfig(1, 1, 1, 0.25), 0, 0, be)
    assert res.y[0] == -0.5
    assert res.comm_rounds == 1 and res.samples_used == 1


@pytest.mark.parametrize("be", BACKENDS)
def test_scalar_two_steps_halve_error(scalar_family, be):
    res = minibatch_sgd_lower(scalar_family, [2.0], [0.0], InnerConfig(2, 1, 1, 0.25), 0, 0, be)
    assert res.y[0] == -0.75
    # error to y* = -1 goes 1 -> 0.5 -> 0.25
    assert abs(res.y[0] + 1) == 0.25


def test_fixed_point_on_zero_variance_family(zero_variance_family):
    fam = zero_variance_family
    x = np.array([0.3, -0.7])
    ys = fam.lower_solution(x)
    for T in (1, 4, 9):
        res = minibatch_sgd_lower(fam, x, ys, InnerConfig(T, 2, 3, 0.2), 1)
        assert np.allclose(res.y, ys, atol=1e-14)


@pytest.mark.skipif(not backend.compiled_available(), reason="compiled extension not built")
def test_backends_agree(small_family):
    cfg = InnerConfig(7, 3, 4, 0.15)
    a = minibatch_sgd_lower(small_family, np.ones(3), np.zeros(4), cfg, 12, 3, "compiled")
    b = minibatch_sgd_lower(small_family, np.ones(3), np.zeros(4), cfg, 12, 3, "python")
    assert np.allclose(a.y, b.y, rtol=0, atol=1e-13)


def test_beta_cap_enforced(scalar_family):
    with pytest.raises(ConfigError, match=r"beta ≤ 1/\(2\*l_g1\)") as err:
        minibatch_sgd_lower(scalar_family, [0.0], [0.0], InnerConfig(1, 1, 1, 0.3), 0)
    assert err.value.key == "beta"
    with pytest.raises(ConfigError):
        check_beta(0.0, 1.0)
    check_beta(0.5, 1.0)


def test_config_validates():
    with pytest.raises(ConfigError):
        InnerConfig(0, 1, 1, 0.1).validate(1.0)


def test_local_sgd_zero_steps(small_family):
    y0 = np.arange(4.0)
    res = local_sgd_lower(small_family, np.ones(3), y0, 0, 1, 2, 0.1, 0)
    assert np.array_equal(res.y, y0) and res.comm_rounds == 0


def test_local_sgd_single_step_matches_minibatch(small_family):
    x, y0 = np.ones(3), np.zeros(4)
    mb = minibatch_sgd_lower(small_family, x, y0, InnerConfig(5, 2, 3, 0.15), 4, 2, "python")
    loc = local_sgd_lower(small_family, x, y0, 1, 2, 3, 0.15, 4, 2, rounds=5)
    assert np.allclose(mb.y, loc.y, atol=1e-14)
    assert mb.comm_rounds == loc.comm_rounds == 5


def test_local_sgd_homogeneous_equals_centralised(zero_variance_family):
    fam = zero_variance_family
    x, y = np.array([1.0, 2.0]), np.zeros(3)
    res = local_sgd_lower(fam, x, y, 6, 1, 3, 0.2, 0)
    for _ in range(6):
        y = y - 0.2 * fam.mean_lower_grad_y(x, y)
    assert np.allclose(res.y, y, atol=1e-14)


def test_client_drift_demonstration():
    # g_1 = (y - 1)^2 / 2 and g_2 = (y + 1)^2 / 2; the step cap is 1 / (2 * 1) = 0.5
    fam = QuadraticFamily.from_clients([scalar_client(A=1.0, B=0.0, c=-1.0),
                                        scalar_client(A=1.0, B=0.0, c=1.0)])
    res = local_sgd_lower(fam, [0.0], [0.0], 1, 1, 2, 0.5, 0, replace=False)
    assert res.y[0] == 0.0
    # a single participating client reports its own local iterate, pulled towards +-1
    local = {local_sgd_lower(fam, [0.0], [0.0], 1, 1, 1, 0.5, s).y[0] for s in range(20)}
    assert local == {0.5, -0.5}


def test_contraction_bound_closed_form():
    assert contraction_bound(4.0, [0.5, 0.5], 1.0, 0.0, 0.0, 1, 1) == 1.0
    assert contraction_bound(0.0, [0.1] * 3, 1.0, 2.0, 1.0, 3, 2) == pytest.approx(4 * 3 / 6 * 0.03)


@given(seed=st.integers(0, 1000), T=st.integers(1, 10))
def test_inner_is_deterministic(seed, T):
    fam = generate_quadratic_family(3, 2, 2, 3, 1.0, 2.0, 1.0, 0)
    cfg = InnerConfig(T, 2, 2, 0.2)
    a = minibatch_sgd_lower(fam, [1.0, 1.0], [0.0, 0.0], cfg, seed, 1)
    b = minibatch_sgd_lower(fam, [1.0, 1.0], [0.0, 0.0], cfg, seed, 1)
    assert np.array_equal(a.y, b.y)

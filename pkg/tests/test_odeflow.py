import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from koodos import diffcore as dc
from koodos import odeflow
from koodos.odeflow import IntegrationConfig
from oracles import central_diff, max_rel_err

RK4 = IntegrationConfig(method="rk4")


def _skew(n, seed, scale=1.0):
    A = np.random.default_rng(seed).normal(size=(n, n)) * scale
    return A - A.T


def test_zero_generator_keeps_state():
    z0 = np.array([0.3, -1.2, 4.0])
    np.testing.assert_array_equal(odeflow.integrate_linear(np.zeros((3, 3)), z0, 0.0, 17.3), z0)


def test_rotation_closed_form():
    K = np.array([[0.0, 1.0], [-1.0, 0.0]])
    z = odeflow.integrate_linear(K, np.array([1.0, 0.0]), 0.0, math.pi / 2)
    np.testing.assert_allclose(z, [0.0, -1.0], atol=1e-9)


@pytest.mark.parametrize("a", [-3.0, -0.1, 0.0, 0.7, 2.5])
def test_scalar_exponential(a):
    z = odeflow.integrate_linear(np.array([[a]]), np.array([1.0]), 0.0, 1.0)
    assert abs(z[0] - math.exp(a)) < 1e-12 * max(1.0, math.exp(a))


@pytest.mark.parametrize("seed", range(10))
def test_expm_matches_scipy(seed):
    A = np.random.default_rng(seed).normal(size=(6, 6)) * (seed + 1) * 0.7
    ref = scipy.linalg.expm(A)
    np.testing.assert_allclose(odeflow.expm(A), ref, rtol=1e-11, atol=1e-12 * np.abs(ref).max())


def test_errors():
    with pytest.raises(dc.ShapeError):
        odeflow.integrate_linear(np.zeros((2, 3)), np.zeros(2), 0, 1)
    with pytest.raises(FloatingPointError):
        odeflow.integrate_linear(np.array([[np.nan]]), np.zeros(1), 0, 1)
    with pytest.raises(dc.ShapeError):
        odeflow.integrate_field(lambda x, t: dc.Tensor(np.zeros((1, 3))), np.zeros((1, 2)), 0, 1)
    with pytest.raises(ValueError):
        IntegrationConfig(steps_per_unit=0)
    with pytest.raises(ValueError):
        IntegrationConfig(tol=0.0)


def test_zero_field():
    x0 = np.array([[1.0, 2.0]])
    out = odeflow.integrate_field(lambda x, t: dc.scale(x, 0.0), x0, 0.0, 3.3)
    np.testing.assert_array_equal(out.data, x0)


def test_exponential_growth_rk4():
    # one RK4 step on x' = x multiplies by the degree-4 Taylor polynomial of e^h
    out = odeflow.integrate_field(lambda x, t: x, np.array([[1.0]]), 0.0, 1.0, RK4)
    h = 0.2
    assert abs(out.item() - (1 + h + h**2 / 2 + h**3 / 6 + h**4 / 24) ** 5) < 1e-14
    assert abs(out.item() - math.e) < 4e-5
    fine = odeflow.integrate_field(lambda x, t: x, np.array([[1.0]]), 0.0, 1.0, IntegrationConfig("rk4", 13))
    assert abs(fine.item() - math.e) < 1e-6


def test_reverse_direction():
    fwd = odeflow.integrate_field(lambda x, t: x, np.array([[1.0]]), 0.0, 1.0, RK4)
    back = odeflow.integrate_field(lambda x, t: x, fwd.data, 1.0, 0.0, RK4)
    assert abs(back.item() - 1.0) < 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_rk4_fourth_order(seed):
    rng = np.random.default_rng(seed)
    K = rng.normal(size=(4, 4)) * 0.5
    z0 = rng.normal(size=4)
    exact = scipy.linalg.expm(K * 2.0) @ z0
    errs = []
    for spu in (4, 8):
        z = odeflow.integrate_linear(K, z0, 0.0, 2.0, IntegrationConfig("rk4", spu))
        errs.append(np.linalg.norm(z - exact))
    assert 12.0 <= errs[0] / errs[1] <= 20.0


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000), st.floats(-40.0, 40.0))
def test_skew_flow_preserves_norm(n, seed, dt):
    K = _skew(n, seed)
    z0 = np.random.default_rng(seed + 1).normal(size=n)
    z = odeflow.integrate_linear(K, z0, 0.0, dt)
    assert abs(np.linalg.norm(z) - np.linalg.norm(z0)) < 1e-9 * max(1.0, np.linalg.norm(z0))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000), st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
def test_flow_invertible(n, seed, t0, t1):
    K = np.random.default_rng(seed).normal(size=(n, n)) * 0.5
    z0 = np.random.default_rng(seed + 1).normal(size=n)
    z1 = odeflow.integrate_linear(K, z0, t0, t1)
    np.testing.assert_allclose(odeflow.integrate_linear(K, z1, t1, t0), z0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000), st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
def test_semigroup(n, seed, a, b):
    K = np.random.default_rng(seed).normal(size=(n, n)) * 0.5
    z0 = np.random.default_rng(seed + 1).normal(size=n)
    two = odeflow.integrate_linear(K, odeflow.integrate_linear(K, z0, 0.0, a), a, a + b)
    one = odeflow.integrate_linear(K, z0, 0.0, a + b)
    np.testing.assert_allclose(two, one, atol=1e-9)


def test_batched_rows_match_single():
    K = _skew(3, 0) + np.eye(3) * 0.1
    Z = np.random.default_rng(2).normal(size=(4, 3))
    dts = np.array([0.0, 1.5, -2.0, 7.0])
    out = odeflow.integrate_linear(K, Z, 0.0, dts)
    for i in range(4):
        np.testing.assert_allclose(out[i], odeflow.integrate_linear(K, Z[i], 0.0, dts[i]), atol=1e-13)


@pytest.mark.parametrize("method", ["expm", "rk4"])
def test_gradient_through_flow(method):
    rng = np.random.default_rng(5)
    K0 = rng.normal(size=(3, 3)) * 0.4
    Z0 = rng.normal(size=(2, 3))
    dts = np.array([1.3, -0.6])
    cfg = IntegrationConfig(method)

    def f(K, Z):
        return dc.sum(dc.mul(odeflow.integrate_linear(dc.Tensor(K), dc.Tensor(Z), 0.0, dts, cfg),
                             dc.Tensor(np.arange(6.0).reshape(2, 3)))).item()

    tape = dc.Tape()
    K, Z = tape.leaf(K0.copy()), tape.leaf(Z0.copy())
    out = odeflow.integrate_linear(K, Z, 0.0, dts, cfg)
    g = dc.backward(dc.sum(dc.mul(out, dc.Tensor(np.arange(6.0).reshape(2, 3)))))
    nK, nZ = central_diff(f, [K0.copy(), Z0.copy()])
    assert max_rel_err(g[K], nK) < 1e-6
    assert max_rel_err(g[Z], nZ) < 1e-6

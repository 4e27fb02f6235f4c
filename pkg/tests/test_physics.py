import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chns.physics import FreeEnergy, PhysParams


def bubble_params():
    return PhysParams(rho1=100.0, rho2=1000.0, eta1=1.0, eta2=10.0,
                      mobility_scale=4e-5, sigma=15.5972, epsilon=0.04,
                      s=10000.0, gravity=(0.0, -0.98), tau=1e-3)


def test_param_validation():
    with pytest.raises(ValueError):
        PhysParams(rho1=2.0, rho2=1.0)
    with pytest.raises(ValueError):
        PhysParams(eta1=-1.0)
    with pytest.raises(ValueError):
        PhysParams(tau=0.0)


def test_rho_endpoint_values():
    p = bubble_params()
    assert np.isclose(p.rho(-1.0), 100.0)
    assert np.isclose(p.rho(1.0), 1000.0)
    assert np.isclose(p.rho(0.0), 550.0)


def test_rho_matched_densities_constant():
    p = PhysParams(rho1=1.0, rho2=1.0)
    phi = np.linspace(-20, 20, 101)
    assert np.allclose(p.rho(phi), 1.0)
    assert np.allclose(p.drho_dphi(phi), 0.0)


def test_rho_bounds_and_monotone():
    p = bubble_params()
    phi = np.linspace(-10, 10, 20001)
    r = p.rho(phi)
    assert r.min() >= p.rho_min > 0
    assert r.max() <= p.rho_max
    assert np.all(np.diff(r) >= -1e-12)


def test_rho_c1_smooth():
    # derivative matches central differences across the blend bands
    p = bubble_params()
    phi = np.linspace(-2.0, 2.0, 4001)
    h = 1e-6
    fd = (p.rho(phi + h) - p.rho(phi - h)) / (2 * h)
    assert np.allclose(fd, p.drho_dphi(phi), atol=1e-5)


def test_drho_linear_region():
    p = bubble_params()
    assert np.isclose(p.drho_dphi(0.0), (1000.0 - 100.0) / 2)


def test_eta_values_and_clamp():
    p = bubble_params()
    assert np.isclose(p.eta(-1.0), 1.0)
    assert np.isclose(p.eta(1.0), 10.0)
    assert np.isclose(p.eta(5.0), 10.0)
    assert np.isclose(p.eta(-5.0), 1.0)


def test_mobility_constant():
    p = PhysParams(mobility_scale=1e-3 * 0.01, epsilon=0.01)
    phi = np.linspace(-3, 3, 7)
    assert np.allclose(p.mobility(phi), 1e-5)


def test_free_energy_spot_values():
    fe = FreeEnergy(sigma=1.0, epsilon=1.0, s=4.0)
    # inside the obstacle interval the convex part vanishes
    phi = np.linspace(-1, 1, 11)
    assert np.allclose(fe.F_plus(phi), 0.0)
    assert np.allclose(fe.dF_plus(phi), 0.0)
    assert np.allclose(fe.newton_G(phi[1:-1]), 0.0)
    assert np.isclose(fe.F(0.0), 0.5)
    assert np.isclose(fe.F(1.0), 0.0)
    assert np.isclose(fe.F(-1.0), 0.0)
    # phi = 1.5: lambda = 0.5, F+ = 0.5, dF+ = 2, G = 4
    assert np.isclose(fe.lam(1.5), 0.5)
    assert np.isclose(fe.F_plus(1.5), 0.5)
    assert np.isclose(fe.dF_plus(1.5), 2.0)
    assert np.isclose(fe.newton_G(1.5), 4.0)


def test_splitting_identity():
    fe = FreeEnergy(sigma=0.01, epsilon=0.02, s=10000.0)
    phi = np.linspace(-3, 3, 1201)
    assert np.allclose(fe.F(phi), fe.F_plus(phi) + fe.F_minus(phi))


@given(a=st.floats(-5, 5), b=st.floats(-5, 5))
@settings(max_examples=300, deadline=None)
def test_dF_plus_monotone(a, b):
    fe = FreeEnergy(sigma=0.01, epsilon=0.02, s=100.0)
    assert (fe.dF_plus(a) - fe.dF_plus(b)) * (a - b) >= 0.0


@given(a=st.floats(-4, 4), b=st.floats(-4, 4))
@settings(max_examples=300, deadline=None)
def test_convex_concave_inequalities(a, b):
    # the two inequalities used by the discrete energy estimate
    fe = FreeEnergy(sigma=0.5, epsilon=0.1, s=50.0)
    tol = 1e-12 * max(1.0, abs(fe.F_plus(a)), abs(fe.F_minus(a)))
    assert fe.F_plus(a) - fe.F_plus(b) <= fe.dF_plus(a) * (a - b) + tol
    assert fe.F_minus(a) - fe.F_minus(b) <= fe.dF_minus(b) * (a - b) + tol


def test_newton_G_matches_finite_differences():
    fe = FreeEnergy(sigma=0.7, epsilon=0.05, s=30.0)
    rng = np.random.default_rng(0)
    phi = rng.uniform(-3, 3, 4000)
    phi = phi[np.abs(np.abs(phi) - 1.0) > 1e-3]
    h = 1e-7
    fd = (fe.dF_plus(phi + h) - fe.dF_plus(phi - h)) / (2 * h)
    assert np.allclose(fd, fe.newton_G(phi), atol=1e-6)

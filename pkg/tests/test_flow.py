import math

import numpy as np
import pytest
import sympy as sp

from mrmemory.errors import CapabilityError, DomainError, OutOfDomainError
from mrmemory.flow import (FIRST_ORDER, BoundsGrid, DerivedFields, DoubleGyre, FieldBounds, FlowField,
                           FlowSample, UniformFlow, derived_fields, estimate_bounds, eval_double_gyre,
                           spectral_norm_2x2)
from mrmemory.params import ParticleParams


def gyre_oracle(A=0.1, omega=math.pi, alpha=0.01):
    """Velocity and derivative blocks of the double gyre by symbolic differentiation."""
    x, y, t = sp.symbols("x y t", real=True)
    a = alpha * sp.sin(omega * t)
    f = a * x**2 + (1 - 2 * a) * x
    H = A * sp.sin(sp.pi * f) * sp.sin(sp.pi * y)
    u = sp.Matrix([-sp.diff(H, y), sp.diff(H, x)])
    X = [x, y]
    grad = u.jacobian(X)
    dudt = sp.diff(u, t) + grad * u
    lap = sp.Matrix([sp.diff(c, x, 2) + sp.diff(c, y, 2) for c in u])
    glap = lap.jacobian(X)
    dlapdt = sp.diff(lap, t) + glap * u
    blocks = [u, grad, dudt, lap, glap, dlapdt]
    return [sp.lambdify((x, y, t), b, "numpy") for b in blocks]


@pytest.fixture(scope="module")
def oracle():
    return gyre_oracle()


POINTS = [(0.3, 0.2, 0.0), (1.1, 0.73, 0.4), (1.9, 0.05, 1.37), (0.0, 1.0, 2.9), (1.0, 0.5, 0.5)]


@pytest.mark.parametrize("x, y, t", POINTS)
def test_double_gyre_matches_symbolic(oracle, x, y, t):
    s = DoubleGyre().evaluate(np.array([x, y]), t)
    got = [s.u, s.grad_u, s.DuDt, s.lap_u, s.grad_lap_u, s.DlapuDt]
    for g, f in zip(got, oracle):
        ref = np.array(f(x, y, t), dtype=float).reshape(np.shape(g))
        assert np.allclose(g, ref, rtol=1e-12, atol=1e-13)


def test_reference_velocity_value():
    s = DoubleGyre().evaluate(np.array([0.5, 0.25]), 0.0)
    assert np.allclose(s.u, [-0.1 * math.pi * math.cos(math.pi / 4), 0.0], atol=1e-15)


def test_first_order_request_skips_laplacian(oracle):
    s = DoubleGyre().evaluate(np.array([0.3, 0.4]), 0.7, order=FIRST_ORDER)
    assert s.lap_u is None and s.grad_lap_u is None and s.DlapuDt is None
    full = DoubleGyre().evaluate(np.array([0.3, 0.4]), 0.7)
    assert np.array_equal(s.grad_u, full.grad_u) and np.array_equal(s.DuDt, full.DuDt)


def test_divergence_free(rng):
    pts = rng.random((200, 2)) * [2.0, 1.0]
    s = DoubleGyre().evaluate(pts, rng.random(200) * 2.0)
    assert np.max(np.abs(np.trace(s.grad_u, axis1=-2, axis2=-1))) < 1e-14


def test_vectorized_shapes():
    pts = np.zeros((4, 3, 2)) + 0.5
    s = DoubleGyre().evaluate(pts, np.linspace(0, 1, 3))
    assert s.u.shape == (4, 3, 2) and s.grad_u.shape == (4, 3, 2, 2)


def test_time_periodic():
    g = DoubleGyre()
    p = np.array([0.7, 0.6])
    assert np.allclose(g.evaluate(p, 0.3).u, g.evaluate(p, 0.3 + g.period).u, atol=1e-15)


def test_strict_domain():
    g = DoubleGyre()
    g.evaluate(np.array([2.0, 1.0]), 0.0, strict=True)
    with pytest.raises(OutOfDomainError):
        eval_double_gyre(g, np.array([2.1, 0.5]), 0.0)
    # outside the box the analytic expressions are still returned by default
    assert np.all(np.isfinite(g.evaluate(np.array([2.1, 0.5]), 0.0).u))


def test_gyre_parameter_validation():
    with pytest.raises(DomainError):
        DoubleGyre(omega=0.0)
    with pytest.raises(DomainError):
        DoubleGyre(A=math.nan)


def test_uniform_flow_has_no_gradients():
    s = UniformFlow((1.0, -2.0)).evaluate(np.zeros((5, 2)), 0.0)
    assert np.allclose(s.u, [1.0, -2.0])
    assert not np.any(s.grad_u) and not np.any(s.DuDt) and not np.any(s.grad_lap_u)


class FirstOrderFlow(FlowField):
    def _evaluate(self, x, t, order):
        z = np.zeros(x.shape[:-1] + (2,))
        return FlowSample(z, np.zeros(x.shape[:-1] + (2, 2)), z)


def test_faxen_needs_third_derivatives():
    params = ParticleParams.from_dimensionless(0.5, 0.005)
    with pytest.raises(CapabilityError):
        derived_fields(FirstOrderFlow(), params, faxen=True)
    A, B, M = derived_fields(FirstOrderFlow(), params).evaluate(np.array([0.1, 0.2]), 0.0)
    assert not np.any(B)


def test_derived_fields_without_faxen():
    params = ParticleParams.from_dimensionless(1.0, 0.01, g_scaled=(0.0, -0.3))
    g = DoubleGyre()
    x, t = np.array([0.4, 0.6]), 0.9
    s = g.evaluate(x, t)
    A, B, M = derived_fields(g, params).evaluate(x, t)
    assert np.array_equal(A, s.u) and np.array_equal(M, s.grad_u)
    assert np.allclose(B, 0.5 * (s.DuDt - np.array([0.0, -0.3])), rtol=1e-15)


def test_derived_fields_with_faxen():
    params = ParticleParams.from_dimensionless(1 / 3, 1 / 300, Re=2.0)
    g = DoubleGyre()
    x, t = np.array([1.3, 0.2]), 0.25
    s = g.evaluate(x, t)
    A, B, M = derived_fields(g, params, faxen=True).evaluate(x, t)
    c = params.gamma / (6 * params.mu)
    M_ref = s.grad_u + c * s.grad_lap_u
    assert np.allclose(A, s.u + c * s.lap_u, rtol=1e-14)
    assert np.allclose(M, M_ref, rtol=1e-14)
    B_ref = (-0.5 * s.DuDt + (params.R / 20 - 1 / 6) * params.gamma / params.mu * s.DlapuDt
             - c * M_ref @ s.lap_u)
    assert np.allclose(B, B_ref, rtol=1e-13)


def test_neutral_particle_has_no_forcing():
    A, B, M = derived_fields(DoubleGyre(), ParticleParams.from_dimensionless(2 / 3, 0.01)).evaluate(
        np.array([0.4, 0.5]), 0.3)
    assert np.all(B == 0.0)


def test_particle_velocity():
    params = ParticleParams.from_dimensionless(0.5, 0.005)
    f = derived_fields(DoubleGyre(), params)
    x, w = np.array([0.5, 0.5]), np.array([0.1, 0.2])
    assert np.allclose(f.particle_velocity(x, 0.0, w), w + DoubleGyre().evaluate(x, 0.0).u)
    assert not np.any(f.faxen_shift(x, 0.0))
    fx = derived_fields(DoubleGyre(), params, faxen=True)
    assert np.allclose(fx.particle_velocity(x, 0.0, w) - w - DoubleGyre().evaluate(x, 0.0).u, fx.faxen_shift(x, 0.0))


def test_spectral_norm_matches_svd(rng):
    m = rng.standard_normal((50, 2, 2))
    assert np.allclose(spectral_norm_2x2(m), np.linalg.norm(m, ord=2, axis=(-2, -1)), rtol=1e-13)


# -- bound constants --------------------------------------------------------------

def test_steady_gyre_bounds_closed_form():
    # alpha = 0: |u| <= pi A, ||grad u||_F <= sqrt(2) pi^2 A, both attained on the grid
    A = 0.1
    f = derived_fields(DoubleGyre(A=A, alpha=0.0), ParticleParams.from_dimensionless(1.0, 0.01))
    b = estimate_bounds(f, BoundsGrid(41, 21, 4), refine_tol=1.0)
    assert b.L_A == pytest.approx(math.pi * A, rel=1e-14)
    assert b.L_M == pytest.approx(math.sqrt(2) * math.pi**2 * A, rel=1e-14)
    # Du/Dt = (pi^3 A^2 / 2) (sin 2 pi x, sin 2 pi y), times |3R/2 - 1| = 1/2
    assert b.L_B == pytest.approx(0.5 * math.sqrt(2) * math.pi**3 * A**2 / 2, rel=1e-12)


def test_spectral_norm_option():
    f = derived_fields(DoubleGyre(A=0.1, alpha=0.0), ParticleParams.from_dimensionless(1.0, 0.01))
    b = estimate_bounds(f, BoundsGrid(41, 21, 4), refine_tol=1.0, matrix_norm="spectral")
    assert b.L_M == pytest.approx(math.pi**2 * 0.1, rel=1e-14)
    with pytest.raises(DomainError):
        estimate_bounds(f, BoundsGrid(41, 21, 4), matrix_norm="max")


def test_bounds_match_symbolic_oracle(oracle):
    grid = BoundsGrid(81, 41, 16)
    f = derived_fields(DoubleGyre(), ParticleParams.from_dimensionless(1.0, 0.01))
    b = estimate_bounds(f, grid, refine_tol=1.0)
    xs, ys = np.meshgrid(np.linspace(0, 2, 81), np.linspace(0, 1, 41), indexing="ij")
    la = lb = lm = 0.0
    for t in np.arange(16) * (2.0 / 16):
        u = np.array(oracle[0](xs, ys, t), dtype=float).reshape(2, *xs.shape)
        gu = np.array(oracle[1](xs, ys, t), dtype=float).reshape(2, 2, *xs.shape)
        dd = np.array(oracle[2](xs, ys, t), dtype=float).reshape(2, *xs.shape)
        la = max(la, np.max(np.hypot(*u)))
        lm = max(lm, np.max(np.sqrt(np.sum(gu**2, axis=(0, 1)))))
        lb = max(lb, np.max(0.5 * np.hypot(*dd)))
    assert (b.L_A, b.L_B, b.L_M) == pytest.approx((la, lb, lm), rel=1e-12)


def test_lipschitz_constant_steady_gyre():
    # steady gyre, neutral particle: only M varies, and |grad M| peaks at 2 pi^3 A on the boundary
    f = derived_fields(DoubleGyre(alpha=0.0), ParticleParams.from_dimensionless(2 / 3, 0.01))
    coarse = estimate_bounds(f, BoundsGrid(201, 101, 2), refine_tol=1.0).L_c
    fine = estimate_bounds(f, BoundsGrid(401, 201, 2), refine_tol=1.0).L_c
    exact = 2 * math.pi**3 * 0.1
    assert abs(fine / exact - 1) < 1e-4
    # second-order differences everywhere, boundary included
    assert abs(coarse / exact - 1) / abs(fine / exact - 1) == pytest.approx(4.0, rel=0.05)


def test_refinement_warning():
    f = derived_fields(DoubleGyre(), ParticleParams.from_dimensionless(1.0, 0.01))
    with pytest.warns(UserWarning, match="under refinement"):
        b = estimate_bounds(f, BoundsGrid(6, 4, 2), refine_tol=1e-6)
    assert b.warnings and set(b.refinement_delta) == {"L_A", "L_B", "L_M", "L_c"}


def test_bounds_need_finite_domain():
    f = derived_fields(UniformFlow(), ParticleParams.from_dimensionless(1.0, 0.01))
    with pytest.raises(DomainError):
        estimate_bounds(f, BoundsGrid(5, 5, 1))


def test_bounds_grid_validation():
    with pytest.raises(DomainError):
        BoundsGrid(2, 5, 1)
    assert BoundsGrid(801, 401, 128).coarser() == BoundsGrid(401, 201, 64)
    assert BoundsGrid(4, 3, 1).coarser() == BoundsGrid(3, 3, 1)


def test_given_constants():
    b = FieldBounds.from_constants(1, 2, 3)
    assert (b.L_A, b.L_B, b.L_M, b.L_c) == (1.0, 2.0, 3.0, None)
    assert b.as_dict()["matrix_norm"] == "given"


@pytest.mark.slow
def test_default_gyre_constants():
    f = derived_fields(DoubleGyre(), ParticleParams.from_dimensionless(1.0, 0.01))
    b = estimate_bounds(f)
    assert b.L_M == pytest.approx(1.4237, rel=1e-4)
    assert b.L_B == pytest.approx(0.1207, rel=1e-3)

import math

import numpy as np
import pytest

from crf_lab.elliptic import (
    apply_L,
    elliptic_estimate_ratio,
    ibp_identity_check,
    min_eigenvalue_estimate,
    nyquist_filter,
    pressure_rhs,
    solve_compatible_pressure,
    solve_L,
    solve_pressure,
    weighted_inner,
    yamabe_normalize,
)
from crf_lab.errors import NormalizationError, SolverError
from crf_lab.flow import einstein_stub
from crf_lab.geometry import curvature, scalar_curvature, scalar_curvature_variation
from crf_lab.grid import GridSpec, MetricField, TensorField, integrate, scalar_field
from crf_lab.samples import base_metric, conformal_metric, random_metric, random_scalar

S0 = -1.0
GRID = GridSpec.cube(16)


def sin_x(grid):
    return scalar_field(np.broadcast_to(np.sin(2 * np.pi * grid.coordinates()[0]), grid.shape).copy(), grid)


def test_apply_L_examples():
    flat = MetricField.flat(GRID)
    one = scalar_field(np.ones(GRID.shape), GRID)
    assert np.allclose(apply_L(flat, S0, one).data, S0)
    f = sin_x(GRID)
    out = apply_L(flat, S0, f).data
    # symbol of the 4th-order first difference, applied twice
    kh = 2 * np.pi / GRID.resolution[0]
    d = (8 * np.sin(kh) - np.sin(2 * kh)) / (6 * GRID.spacing[0])
    assert np.max(np.abs(out - (-2 * d**2 + S0) * f.data)) < 1e-10


def test_apply_L_requires_negative_s0():
    with pytest.raises(ValueError):
        apply_L(MetricField.flat(GRID), 0.5, sin_x(GRID))


def test_apply_L_is_self_adjoint_and_negative():
    g = random_metric(GRID, 1, 0.1)
    f, h = random_scalar(GRID, 2), random_scalar(GRID, 3)
    lf_h = weighted_inner(g, apply_L(g, S0, f), h)
    f_lh = weighted_inner(g, f, apply_L(g, S0, h))
    norms = math.sqrt(weighted_inner(g, f, f) * weighted_inner(g, h, h))
    assert abs(lf_h - f_lh) / norms < 1e-12
    assert weighted_inner(g, apply_L(g, S0, f), f) <= S0 * weighted_inner(g, f, f)


def test_solve_round_trip():
    g = random_metric(GRID, 4, 0.1)
    rhs = random_scalar(GRID, 5)
    u, rep = solve_L(g, S0, rhs)
    assert rep.converged and rep.final_residual_l2 <= rep.tolerance
    resid = apply_L(g, S0, u).data - rhs.data
    assert math.sqrt(integrate(scalar_field(resid**2, GRID), g)) < 1e-9


def test_solve_reports_stall():
    g = random_metric(GRID, 4, 0.1)
    with pytest.raises(SolverError) as info:
        solve_L(g, S0, random_scalar(GRID, 5), tol=1e-14, max_iter=2)
    assert info.value.report.iterations == 2


def test_pressure_of_einstein_stub_vanishes():
    g = random_metric(GRID, 6, 0.1)
    p, rep = solve_pressure(g, S0, ricci=einstein_stub(g, S0))
    assert rep.iterations == 0 and np.all(p.data == 0.0)


def test_pressure_spectral_gap_bound():
    g = random_metric(GRID, 7, 0.1)
    p, _ = solve_pressure(g, S0)
    rhs = pressure_rhs(g, S0)
    p2 = integrate(scalar_field(p.data**2, GRID), g)
    r2 = integrate(scalar_field(rhs.data**2, GRID), g)
    assert p2 <= r2 / S0**2
    lam = min_eigenvalue_estimate(g, S0, iterations=8)
    assert lam >= abs(S0) * (1 - 1e-6)


def test_ibp_identity_trivial_cases():
    g = random_metric(GRID, 8, 0.1)
    zero = scalar_field(np.zeros(GRID.shape), GRID)
    assert ibp_identity_check(g, S0, zero) == (0.0, 0.0)
    one = scalar_field(np.ones(GRID.shape), GRID)
    lhs, rhs = ibp_identity_check(g, S0, one)
    assert lhs == pytest.approx(S0 * g.volume(), rel=1e-12)
    assert rhs == pytest.approx(S0 * g.volume(), rel=1e-12)


def test_elliptic_estimate_ratio_bounded_under_refinement():
    ratios = []
    for n in (16, 32):
        grid = GridSpec.cube(n)
        g = random_metric(grid, 9, 0.1)
        ratios.append(elliptic_estimate_ratio(g, S0, random_scalar(grid, 10)))
    assert ratios[1] <= 2 * ratios[0]


def test_nyquist_filter_is_a_projection():
    grid = GridSpec.cube(8)
    proj = nyquist_filter(grid)
    v = np.random.default_rng(0).standard_normal(grid.shape).ravel()
    pv = proj(v)
    assert np.allclose(proj(pv), pv)
    x = grid.coordinates()[0]
    nyq = np.broadcast_to(np.cos(np.pi * x / grid.spacing[0]), grid.shape).ravel()
    assert np.max(np.abs(proj(nyq))) < 1e-12


def test_compatible_pressure_makes_curvature_stationary():
    g, _ = yamabe_normalize(base_metric(GRID, 1, strength=0.5), S0)
    p, rep = solve_compatible_pressure(g, S0)
    assert rep.converged
    V = curvature(g).ricci - g.tensor() * (S0 / 3) + g.tensor() * p
    ds = scalar_curvature_variation(g, V).data
    proj = nyquist_filter(GRID)
    # stationary up to the excluded Nyquist plane
    assert np.max(np.abs(proj(ds.ravel()))) < 1e-7
    p_std, _ = solve_pressure(g, S0)
    assert np.max(np.abs(p.data - p_std.data)) < 0.05 * np.max(np.abs(p_std.data))


def test_yamabe_fixed_point_converges_at_once():
    g, _ = yamabe_normalize(base_metric(GRID, 2, strength=0.5), S0)
    g2, rep = yamabe_normalize(g, S0)
    assert rep.iterations <= 2
    assert np.max(np.abs(g2.g - g.g)) < 1e-6


def test_yamabe_rejects_conformally_flat_metric():
    # total scalar curvature of e^{2 phi} delta is 2 int e^phi |d phi|^2 > 0
    x, y, _ = GRID.coordinates()
    phi = 0.1 * (np.sin(2 * np.pi * x) + np.cos(2 * np.pi * y))
    with pytest.raises(NormalizationError):
        yamabe_normalize(conformal_metric(GRID, phi), S0)


def test_yamabe_scaling_consistency():
    g, _ = yamabe_normalize(base_metric(GRID, 3, strength=0.5), S0)
    lam = 2.5
    assert np.allclose(scalar_curvature(g.scaled(lam)).data, S0 / lam, atol=1e-7)


def test_yamabe_rejects_flat_metric():
    with pytest.raises(NormalizationError):
        yamabe_normalize(MetricField.flat(GRID), S0)

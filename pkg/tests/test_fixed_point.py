import math

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from vpctl.absorption_transport import WeightedEnsemble, lattice_ensemble
from vpctl.control_synthesis import PotentialTerm, ReferenceControl, build_bump, dipole_potential
from vpctl.fields import ConstantField, MagneticField, MagneticProfile, ZeroField
from vpctl.fixed_point import (ExtensionOperator, FixedPointSettings, analytic_initial_data, blend_Pi, extend_pi,
                               perturbing_potential, problem_for, run_fixed_point, speed_modulus_check,
                               unscale_time, verify_nonconcentration)
from vpctl.poisson_spectral import nodal_values
from vpctl.torus_geometry import Ball, Region

N = 64
CUTOFF = Region(balls=(Ball((0.5, 0.5), 0.3),))
CORRECTION = Region(balls=(Ball((0.5, 0.5), 0.15),))


@pytest.fixture(scope="module")
def op():
    return ExtensionOperator(CUTOFF, CORRECTION, N)


def five_point(g):
    return 4 * g - np.roll(g, 1, 0) - np.roll(g, -1, 0) - np.roll(g, 1, 1) - np.roll(g, -1, 1)


def test_correction_bump_has_unit_mass(op):
    assert op.bump.sum() / N ** 2 == pytest.approx(1.0, rel=1e-13)
    assert op.bump.min() >= 0.0
    assert not (op.bump > 0)[~CORRECTION.grid_mask(N)].any()


def test_extend_constant_needs_no_correction(op):
    rho = np.full((N, N), 0.7)
    ext, coeff = extend_pi(op, rho, 0.7)
    assert abs(coeff) <= 1e-12
    assert np.abs(ext - 0.7).max() <= 1e-12


def test_extend_zero_gives_pure_bump(op):
    ext, coeff = extend_pi(op, np.zeros((N, N)), 0.4)
    assert coeff == pytest.approx(0.4, abs=1e-15)
    assert np.abs(ext - 0.4 * op.bump).max() <= 1e-13


def test_extend_mass_deficit(op):
    ext, coeff = extend_pi(op, np.ones((N, N)), 1.3)
    assert coeff == pytest.approx(0.3, abs=1e-12)
    assert ext.sum() / N ** 2 == pytest.approx(1.3, abs=1e-12)


@hsettings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_infill_is_restriction_plus_harmonic(seed):
    op = ExtensionOperator(CUTOFF, CORRECTION, N)
    rho = np.random.default_rng(seed).random((N, N))
    out = op.infill(rho)
    inside = op.mask
    assert np.array_equal(out[~inside], rho[~inside])
    assert np.abs(five_point(out)[inside]).max() <= 1e-10
    # discrete maximum principle
    assert out[inside].max() <= rho[~inside].max() + 1e-12
    assert out[inside].min() >= rho[~inside].min() - 1e-12


def test_infill_ignores_values_inside_cutoff(op):
    base = nodal_values(lambda a, b: np.sin(2 * np.pi * a) + b, N)
    noisy = base.copy()
    noisy[op.mask] += 100.0
    assert np.array_equal(op.infill(base), op.infill(noisy))


def test_blend_is_identity_at_start_and_full_extension_midway(op):
    T = 1.0
    ups2 = build_bump("Upsilon_tilde", T)
    rho = np.random.default_rng(1).random((N, N))
    assert np.array_equal(blend_Pi(op, rho, 0.0, ups2, 2.0), rho)
    ext, _ = op.extend(rho, 2.0)
    assert np.array_equal(blend_Pi(op, rho, T / 2, ups2, 2.0), ext)
    mid = blend_Pi(op, rho, 0.015, ups2, 2.0)
    w = float(ups2(0.015))
    assert 0 < w < 1
    assert np.allclose(mid, (1 - w) * rho + w * ext, atol=1e-14)


def small_reference(n=N):
    theta, source = dipole_potential((0.5, 0.5), (1.0, 0.0), 0.1, n)
    term = PotentialTerm("pulse0", theta, None, 2.0, 0.3, 0.4, _lap=source)
    term.drive = term.grad
    return ReferenceControl("bounded", 1.0, (0.5, 0.5), 0.2, [term], None, {"M": 1.0, "M_tilde": 2.0}, {}, n)


FAST = FixedPointSettings(grid=N, knots=9, dt_max=2e-2)


def test_zero_data_converges_to_reference_in_one_iteration():
    ref = small_reference()
    empty = WeightedEnsemble(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros(0))
    rep = run_fixed_point(empty, ref, ZeroField(), settings=FAST)
    assert rep.converged and rep.iterations == 1
    assert rep.residual_outside == 0.0
    assert np.abs(rep.state.rho).max() == 0.0


def test_small_data_keeps_mass_and_contracts():
    ref = small_reference()
    f0 = lattice_ensemble(analytic_initial_data(1e-3), 8, 4, 2.0)
    rep = run_fixed_point(f0, ref, ZeroField(), max_iters=6, tol=1e-9, settings=FAST)
    assert max(rep.extra["mass_drift"]) <= 1e-10 * max(1.0, f0.total_mass)
    gaps = rep.gap_history
    assert gaps[-1] < gaps[0]
    assert rep.state.diagnostics["point_d_ok"]


def test_problem_for_local_reference_regions():
    ref = small_reference()
    prob = problem_for(ref, ConstantField([0.1, 0.0]))
    assert prob.kind == "local"
    assert prob.cutoff == Region(balls=(Ball((0.5, 0.5), 0.4),))
    assert prob.window == (1 / 24, 23 / 24)
    with pytest.raises(TypeError):
        problem_for(object())


def test_unscale_time():
    assert unscale_time(0.5, 0.25) == pytest.approx(0.125)
    assert np.array_equal(unscale_time([0.0, 1.0], 1.0), [0.0, 1.0])


def test_nonconcentration_zero_force_is_isometry():
    rng = np.random.default_rng(0)
    x, y = rng.random((30, 2)), rng.random((30, 2))
    out = verify_nonconcentration(ZeroField(), x, y, np.linspace(0, 1, 9))
    assert out["c"] == pytest.approx(1.0, abs=1e-14)
    with pytest.raises(ValueError):
        verify_nonconcentration(ZeroField(), x, x, [0.0, 1.0])


def test_nonconcentration_constant_force_translates_rigidly():
    rng = np.random.default_rng(1)
    x, y = rng.random((30, 2)) * 0.4, rng.random((30, 2)) * 0.4
    out = verify_nonconcentration(ConstantField([0.3, -0.2]), x, y, np.linspace(0, 1, 5))
    assert out["c"] == pytest.approx(1.0, abs=1e-12)


def test_perturbing_potential_respects_bound():
    eps = 0.05
    P = perturbing_potential(eps, seed=4)
    rng = np.random.default_rng(2)
    x = rng.random((5000, 2))
    for t in (0.0, 0.37, 0.9):
        assert np.linalg.norm(P(t, x, np.zeros_like(x)), axis=1).max() <= eps + 1e-15


def test_speed_modulus_magnetic_plus_bounded_force():
    prof = MagneticProfile.from_function(lambda a, b: 1 + np.cos(2 * np.pi * a) ** 2, 64)
    force = MagneticField(prof) + ConstantField([0.6, 0.8])
    rng = np.random.default_rng(5)
    x, v = rng.random((50, 2)), rng.normal(scale=3, size=(50, 2))
    out = speed_modulus_check(force, x, v, 1.0, 1.0, n_times=8)
    assert out["ok"]


def test_analytic_initial_data_is_positive_and_decays():
    f0 = analytic_initial_data(0.2)
    x = np.random.default_rng(0).random((100, 2))
    vals = f0(x, np.zeros_like(x))
    assert np.all(vals > 0) and vals.max() <= 0.2 * 1.5 + 1e-15
    far = f0(x, np.full_like(x, 100.0))
    assert np.all(far < 1e-8)
    assert f0(np.zeros((1, 2)), np.zeros((1, 2)))[0] == pytest.approx(0.3)
    assert math.isclose(analytic_initial_data(0.0)(x, x).max(), 0.0)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vpctl.fields import (AnalyticField, ConstantField, KnotGridField, MagneticField, MagneticProfile,
                          ReversedField, ScaledField, ZeroField, eval_force, measured_sup,
                          potential_gradient_field, reverse_data_for_lambda_minus_one, scale_distribution,
                          scale_field, scale_particles)
from vpctl.poisson_spectral import nodal_values

finite = st.floats(-20, 20, allow_nan=False)


def test_magnetic_unit_example():
    f = MagneticField(MagneticProfile.constant(1.0, 16))
    assert eval_force(f, 0.0, [0.3, 0.3], [1.0, 0.0]) == pytest.approx([0.0, -1.0])


@given(finite, finite, st.floats(0, 1, exclude_max=True), st.floats(0, 1, exclude_max=True))
def test_magnetic_force_orthogonal_to_velocity(v1, v2, x1, x2):
    prof = MagneticProfile.from_function(lambda a, b: 1 + 0.5 * np.sin(2 * np.pi * a) * np.cos(2 * np.pi * b), 32)
    out = eval_force(MagneticField(prof), 0.0, [x1, x2], [v1, v2])
    assert np.all(np.isfinite(out))
    assert out @ np.array([v1, v2]) == 0.0 or abs(out @ np.array([v1, v2])) <= 1e-12 * (v1 ** 2 + v2 ** 2)


def test_sum_with_negation_cancels():
    F = ConstantField([1.0, -2.0]) + AnalyticField(lambda t, x, v: np.sin(x), 1.0)
    out = eval_force(F - F, 0.5, [0.2, 0.9], [3.0, 1.0])
    assert np.array_equal(out, [0.0, 0.0])


def test_gradient_of_cosine_vanishes_at_peak():
    phi = nodal_values(lambda a, b: np.cos(2 * np.pi * a) / (-4 * np.pi ** 2), 64)
    f = potential_gradient_field(phi)
    assert np.abs(eval_force(f, 0.0, [0.0, 0.0], [0.0, 0.0])).max() <= 1e-14
    # off peak the force is the symbolic derivative sin(2 pi x1)/(2 pi)
    assert eval_force(f, 0.0, [0.25, 0.0], [0.0, 0.0]) == pytest.approx([1 / (2 * np.pi), 0.0], abs=1e-14)


def test_scale_field_examples():
    x, v = np.array([0.1, 0.2]), np.array([2.0, 0.0])
    mag = MagneticField(MagneticProfile.constant(1.0, 16))
    assert np.array_equal(eval_force(scale_field(mag, 1.0), 0.3, x, v), eval_force(mag, 0.3, x, v))
    assert eval_force(scale_field(mag, 0.5), 0.0, x, v) == pytest.approx([0.0, -1.0])
    assert eval_force(scale_field(ConstantField([1.0, 0.0]), 0.5), 0.0, x, v) == pytest.approx([0.25, 0.0])


def test_scaled_magnetic_parts_carry_lambda():
    mag = MagneticField(MagneticProfile.constant(2.0, 8))
    parts, rest = ScaledField(mag, -0.5).magnetic_parts()
    assert rest is None and parts[0][0] == -0.5


def test_scale_distribution_examples():
    def f(t, x, v):
        return np.exp(-np.sum((np.asarray(v) - 1.0) ** 2)) * (1 + t)

    same = scale_distribution(f, 1.0)
    assert same(0.3, [0.1, 0.1], [0.5, 0.2]) == f(0.3, [0.1, 0.1], [0.5, 0.2])
    rev = scale_distribution(f, -1.0)
    assert rev(0.4, [0.0, 0.0], [0.3, -0.2]) == f(-0.4, [0.0, 0.0], [-0.3, 0.2])


def test_point_mass_scaling_moves_velocity_keeps_weight():
    x, v, w, m = scale_particles([[0.0, 0.0]], [[1.0, 0.0]], [1.0], [1.0], 0.5)
    assert v.tolist() == [[0.5, 0.0]]
    assert w.tolist() == [1.0]
    # cell volume scales by lam^2 in two velocity dimensions
    assert m.tolist() == [0.25]


@given(st.floats(-4, 4).filter(lambda s: abs(s) > 1e-3))
def test_particle_mass_scales_by_lambda_squared(lam):
    rng = np.random.default_rng(0)
    w, m = rng.random(50), rng.random(50)
    _, _, w2, m2 = scale_particles(np.zeros((50, 2)), np.ones((50, 2)), w, m, lam)
    assert np.sum(w2 * m2) == pytest.approx(lam ** 2 * np.sum(w * m), rel=1e-12)


def test_reverse_even_data_and_constant_force():
    def f1(x, v):
        return np.exp(-np.sum(np.asarray(v) ** 2))

    init, force = reverse_data_for_lambda_minus_one(f1, ConstantField([1.0, 0.0]), 2.0)
    assert init([0.2, 0.3], [0.4, -1.0]) == f1([0.2, 0.3], [0.4, -1.0])
    assert eval_force(force, 0.7, [0.5, 0.5], [3.0, 1.0]) == pytest.approx([1.0, 0.0])


def test_double_reversal_of_magnetic_field_is_identity():
    prof = MagneticProfile.from_function(lambda a, b: 1 + np.cos(2 * np.pi * a) ** 2, 32)
    mag = MagneticField(prof)
    T = 1.5
    once = ReversedField(mag, T)
    twice = ReversedField(once, T)
    rng = np.random.default_rng(1)
    x, v = rng.random((20, 2)), rng.normal(size=(20, 2))
    assert np.allclose(once(0.3, x, v), -mag(T - 0.3, x, v))
    assert np.array_equal(twice(0.3, x, v), mag(0.3, x, v))


def test_recorded_sup_bounds_sample():
    F = ConstantField([0.3, 0.4])
    assert measured_sup(F) == pytest.approx(F.sup_norm, rel=0.05)
    phi = nodal_values(lambda a, b: np.sin(2 * np.pi * a) * np.cos(2 * np.pi * b), 64)
    g = potential_gradient_field(phi)
    sampled = measured_sup(g, n=20000)
    assert sampled <= g.sup_norm * (1 + 1e-12)
    assert sampled >= 0.95 * g.sup_norm


def test_profile_rejects_negative_and_nan():
    with pytest.raises(ValueError):
        MagneticProfile(np.full((4, 4), -1.0))
    with pytest.raises(ValueError):
        MagneticProfile(np.full((4, 4), np.nan))


def test_knot_field_interpolates_linearly():
    g0 = np.zeros((8, 8, 2))
    g1 = np.ones((8, 8, 2))
    f = KnotGridField([0.0, 1.0], [g0, g1])
    out = f(np.array([0.25, 2.0]), np.array([[0.1, 0.2], [0.1, 0.2]]), np.zeros((2, 2)))
    assert out[0] == pytest.approx([0.25, 0.25])
    assert out[1].tolist() == [0.0, 0.0]


def test_zero_field_and_scaled_windows():
    assert ZeroField()(0.0, np.zeros((3, 2)), np.zeros((3, 2))).shape == (3, 2)
    with pytest.raises(ValueError):
        ScaledField(ZeroField(), 0.0)


@settings(deadline=None)
@given(st.floats(0.1, 3.0), st.floats(-1, 1))
def test_scaled_field_definition(lam, t):
    F = AnalyticField(lambda tt, x, v: np.stack([np.cos(tt) + v[:, 0], np.sin(x[:, 1]) * v[:, 1]], 1), math.inf)
    x, v = np.array([[0.3, 0.6]]), np.array([[1.2, -0.7]])
    got = ScaledField(F, lam)(t, x, v)
    assert np.allclose(got, lam ** 2 * F(lam * t, x, v / lam), rtol=1e-14, atol=1e-14)

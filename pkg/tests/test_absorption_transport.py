import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vpctl.absorption_transport import (BALL_THRESHOLDS, GAMMA2, GAMMA3, GAMMA4, GAMMA_MINUS, GAMMA_PLUS, NONE,
                                        AbsorptionLog, BoundaryAtlas, OpacityFn, WeightedEnsemble,
                                        lattice_ensemble, min_gamma_separation, opacity, residual_mass_outside,
                                        smoothstep, transport_absorb, verify_crossing_bound)
from vpctl.control_synthesis import build_bump
from vpctl.fields import MagneticField, MagneticProfile, ZeroField
from vpctl.torus_geometry import Ball, Region, Slab

T = 1.0
CENTER = (0.5, 0.5)
R0 = 0.2
ATLAS = BoundaryAtlas.sphere(CENTER, R0)
U = OpacityFn(ATLAS)
UPS = build_bump("Upsilon", T)
GAMMA_MINUS_FAMILY = (GAMMA_MINUS, GAMMA2, GAMMA3, GAMMA4)


def on_sphere(angle):
    nrm = np.array([math.cos(angle), math.sin(angle)])
    return np.array(CENTER) + R0 * nrm, nrm


def test_ball_classification_examples():
    x, nrm = on_sphere(0.7)
    cls = ATLAS.classify(x, -3 * nrm)[0]
    # gamma4- is nested inside gamma3-
    assert cls in (GAMMA3, GAMMA4)
    assert ATLAS.classify(x, nrm)[0] == GAMMA_PLUS
    tangent = 10 * np.array([-nrm[1], nrm[0]])
    assert ATLAS.classify(x, tangent)[0] not in GAMMA_MINUS_FAMILY


def test_classify_rejects_states_off_the_surface():
    with pytest.raises(ValueError):
        ATLAS.classify(np.array([0.5, 0.5]), np.array([1.0, 0.0]))


@settings(max_examples=200)
@given(st.floats(0, 2 * math.pi), st.floats(0, 6), st.floats(-math.pi, math.pi))
def test_classes_are_nested(angle, speed, turn):
    x, nrm = on_sphere(angle)
    c, s = math.cos(turn), math.sin(turn)
    v = speed * np.array([c * nrm[0] - s * nrm[1], s * nrm[0] + c * nrm[1]])
    cls = ATLAS.classify(x, v, check=False)[0]
    sp = np.linalg.norm(v)
    vn = float(v @ nrm)
    in_minus = sp > 0.5 and vn < -sp / 10
    in_2 = sp >= 1 and vn <= -sp / 8
    in_3 = sp >= 2 and vn <= -sp / 5
    # nesting of the predicates themselves
    assert (not in_3 or in_2) and (not in_2 or in_minus)
    if cls >= GAMMA3 and cls != GAMMA_PLUS:
        assert in_3
    if cls == GAMMA2:
        assert in_2 and not in_3
    u = U(x[None, :], v[None, :])[0]
    assert 0.0 <= u <= 1.0
    if not in_2:
        assert u == 1.0
    if in_3:
        assert u == 0.0


def test_threshold_separation_positive():
    assert min_gamma_separation(ATLAS) > 0
    assert min_gamma_separation(BoundaryAtlas.slab_pair(Slab((1, 0), 0.0, 0.1))) > 0


def test_opacity_examples():
    x, nrm = on_sphere(1.1)
    fast_in = -3 * nrm
    assert opacity(ATLAS, U, T / 2, x[None], fast_in[None], UPS)[0] == 0.0
    assert opacity(ATLAS, U, T / 100, x[None], fast_in[None], UPS)[0] == 1.0
    slow = -0.4 * nrm
    for t in (0.0, T / 3, T / 2):
        assert opacity(ATLAS, U, t, x[None], slow[None], UPS)[0] == 1.0


def test_smoothstep_limits():
    assert smoothstep(-1.0) == 0.0 and smoothstep(0.0) == 0.0
    assert smoothstep(1.0) == 1.0 and smoothstep(3.0) == 1.0
    assert smoothstep(0.5) == pytest.approx(0.5)


def aimed_ensemble(count=50):
    ys = 0.5 + np.linspace(-0.1, 0.1, count)
    x = np.stack([np.full(count, 0.05), ys], 1)
    v = np.tile([3.0, 0.0], (count, 1))
    return WeightedEnsemble(x, v, np.ones(count), np.full(count, 1.0 / count))


def test_full_absorption_on_gamma3():
    ens = aimed_ensemble()
    ens.t = T / 2
    out = transport_absorb(ens, ZeroField(), T / 2, T / 2 + 0.2, ATLAS, U, UPS, dt=1e-2, step_length=0.02)
    assert out.total_mass <= 1e-12 * ens.total_mass
    assert out.culled_mass == 0.0


def test_zero_window_is_pure_transport():
    ens = aimed_ensemble()
    out = transport_absorb(ens, ZeroField(), 0.0, 0.2, ATLAS, U, lambda t: np.zeros_like(t), dt=1e-2,
                           step_length=0.02)
    assert np.array_equal(out.weight, ens.weight)
    assert np.allclose(out.x, (ens.x + 0.2 * ens.v) % 1.0, atol=1e-12)


def test_double_crossing_multiplies_exactly():
    ens = WeightedEnsemble([[0.1, 0.5]], [[1.0, 0.0]], [1.0], [1.0])
    half = lambda x, v: np.full(np.atleast_2d(x).shape[0], 0.5)  # noqa: E731
    log = AbsorptionLog()
    out = transport_absorb(ens, ZeroField(), 0.0, 1.25, ATLAS, half, lambda t: np.ones_like(t), dt=1e-2,
                           step_length=0.02, log=log, cull=False)
    assert out.crossings[0] == 2
    assert out.weight[0] == 0.25
    t, _, _, mass, _ = log.arrays()
    assert t == pytest.approx([0.2, 1.2], abs=1e-9)
    assert mass.tolist() == [0.5, 0.25]


@pytest.mark.parametrize("k", [1, 3, 7])
def test_free_transport_crossing_count(k):
    rng = np.random.default_rng(k)
    ang = rng.uniform(0, 2 * np.pi, 400)
    v = k * np.stack([np.cos(ang), np.sin(ang)], 1)
    ens = WeightedEnsemble(rng.random((400, 2)), v, np.ones(400), np.ones(400))
    out = transport_absorb(ens, ZeroField(), 0.0, 1.0, ATLAS, U, lambda t: np.zeros_like(t), dt=1e-2,
                           step_length=0.02, max_length=0.5, cull=False)
    # consecutive entries are at least 1 - 2 r0 apart along a straight line
    assert out.crossings.max() <= k / (1 - 2 * R0) + 1
    worst, ok = verify_crossing_bound(out, max(1 / (1 - 2 * R0), 1.0))
    assert ok


@pytest.mark.parametrize("k", [1, 3, 7])
def test_axis_ray_enters_once_per_unit_length(k):
    # from (0, 0.5) along (1, 0) the ray enters the ball images at x1 = 0.3 + m
    ens = WeightedEnsemble([[0.0, 0.5]], [[float(k), 0.0]], [1.0], [1.0])
    out = transport_absorb(ens, ZeroField(), 0.0, 1.0, ATLAS, U, lambda t: np.zeros_like(t), dt=1e-2,
                           step_length=0.02, max_length=0.5, cull=False)
    assert out.crossings[0] == k


def test_stationary_particle_never_crosses():
    ens = WeightedEnsemble([[0.1, 0.1], [0.5, 0.5]], np.zeros((2, 2)), [1.0, 1.0], [1.0, 1.0])
    out = transport_absorb(ens, ZeroField(), 0.0, 1.0, ATLAS, U, UPS, cull=False)
    assert out.crossings.tolist() == [0, 0]
    assert verify_crossing_bound(out, 0.0) == (0.0, True)


def test_magnetic_orbit_crossings_grow_at_most_linearly():
    prof = MagneticProfile.constant(2 * np.pi, 16)
    counts = []
    for speed in (1.0, 2.0, 4.0):
        ens = WeightedEnsemble([[0.5, 0.5 + 0.2 - speed / (2 * np.pi)]], [[speed, 0.0]], [1.0], [1.0])
        out = transport_absorb(ens, MagneticField(prof), 0.0, 3.0, ATLAS, U, lambda t: np.zeros_like(t),
                               dt=1e-3, step_length=0.01, scheme="rotation-splitting", cull=False)
        counts.append(int(out.crossings[0]))
    ratios = [c / (1 + s) for c, s in zip(counts, (1.0, 2.0, 4.0))]
    assert max(ratios) <= 3.0


def test_residual_mass_outside_examples():
    omega = Region(balls=(Ball(CENTER, 2 * R0),))
    ens = lattice_ensemble(lambda x, v: np.ones(len(x)), 64, 2, 1.0)
    total = ens.total_mass
    expect = (1 - omega.area(1024)) * total
    assert residual_mass_outside(ens, omega) == pytest.approx(expect, rel=2e-2)
    dead = WeightedEnsemble(ens.x, ens.v, np.zeros(len(ens)), ens.measure)
    assert residual_mass_outside(dead, omega) == 0.0
    half = WeightedEnsemble(ens.x, ens.v, np.where(np.arange(len(ens)) % 2 == 0, 1.0, 0.0), ens.measure)
    assert 0.0 <= residual_mass_outside(half, omega) <= residual_mass_outside(ens, omega)


def test_weights_never_increase_random_run():
    rng = np.random.default_rng(9)
    n = 500
    ens = WeightedEnsemble(rng.random((n, 2)), rng.normal(scale=3.0, size=(n, 2)), rng.random(n), np.ones(n) / n)
    out = transport_absorb(ens, ZeroField(), 0.0, T, ATLAS, U, UPS, dt=1e-2, step_length=0.02, max_length=0.5,
                           cull=False)
    assert np.all(out.weight <= ens.weight[out.ids])
    assert out.total_mass <= ens.total_mass


def test_ensemble_scaling_mass_identity():
    ens = lattice_ensemble(lambda x, v: 1 + x[:, 0] * np.exp(-np.sum(v ** 2, 1)), 8, 6, 3.0)
    for lam in (0.5, 0.25, -1.0):
        assert ens.scaled(lam).total_mass == pytest.approx(lam ** 2 * ens.total_mass, rel=1e-12)


def test_default_thresholds_values():
    assert BALL_THRESHOLDS["gamma3-"] == (2.0, 1 / 5)
    assert NONE == 0

import math
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import quad

from vpctl.absorption_transport import GAMMA3, BoundaryAtlas
from vpctl.control_synthesis import (PotentialTerm, ReferenceControl, SynthesisError, build_accelerator, build_bump,
                                     build_hyperplane_control, build_sweep, critical_cells, dipole_potential,
                                     first_class_hits, slab_potential, unit_bump, unit_bump_derivative,
                                     velocity_bump, velocity_bump_gradient)
from vpctl.poisson_spectral import gradient, laplacian
from vpctl.torus_geometry import Ball, Region, Slab, grid_coords, torus_dist

CACHED_BOUNDED = Path(__file__).resolve().parents[1] / ".vpctl-cache" / "local_bounded" / "reference"


def test_upsilon_examples():
    ups = build_bump("Upsilon", 1.0)
    assert float(ups(0.5)) == 1.0
    assert float(ups(0.0)) == 0.0 and float(ups(1.0)) == 0.0
    ts = np.linspace(1 / 24, 23 / 24, 101)
    assert np.all(ups(ts) == 1.0)
    assert np.all((ups(np.linspace(0, 1, 1001)) >= 0) & (ups(np.linspace(0, 1, 1001)) <= 1))


def test_upsilon_tilde_switches_on_early():
    ups = build_bump("Upsilon_tilde", 2.0)
    assert float(ups(0.0)) == 0.0 and float(ups(2.0 / 100)) == 0.0
    assert float(ups(2.0 / 48)) == 1.0 and float(ups(1.9)) == 1.0


def test_z_vanishes_outside_unit_ball():
    assert float(velocity_bump(np.array([1.5, 0.0]))) == 0.0
    assert float(velocity_bump(np.array([0.6, 0.8]))) == 0.0
    assert float(velocity_bump(np.array([0.0, 0.0]))) > 0


def test_z_unit_integral():
    # polar quadrature, independent of the normalization constant's own quad call
    h = 1e-3
    r = np.arange(h / 2, 1.0, h)
    vals = velocity_bump(np.stack([r, np.zeros_like(r)], 1))
    assert 2 * np.pi * np.sum(vals * r) * h == pytest.approx(1.0, abs=1e-6)


def test_y_integrates_to_one():
    T = 1.0
    y = build_bump("Y", T)
    total = quad(lambda t: float(y(t)), 0.0, T, points=[T / 3, 2 * T / 3], epsabs=1e-13, limit=200)[0]
    assert total == pytest.approx(1.0, abs=1e-8)
    assert float(y(0.1)) == 0.0 and float(y(0.9)) == 0.0


def test_lambda_derivative_matches_finite_difference():
    s = np.linspace(0.05, 0.95, 37)
    h = 1e-6
    fd = (unit_bump(s + h) - unit_bump(s - h)) / (2 * h)
    assert np.abs(fd - unit_bump_derivative(s)).max() <= 1e-5 * np.abs(fd).max()


def test_z_gradient_matches_finite_difference():
    rng = np.random.default_rng(0)
    v = rng.uniform(-0.6, 0.6, size=(20, 2))
    h = 1e-6
    fd = np.stack([(velocity_bump(v + h * e) - velocity_bump(v - h * e)) / (2 * h) for e in np.eye(2)], 1)
    assert np.abs(fd - velocity_bump_gradient(v)).max() <= 1e-6


def test_bump_rejects_bad_inputs():
    with pytest.raises(ValueError):
        build_bump("Upsilon", 0.0)
    with pytest.raises(ValueError):
        build_bump("Y", 1.0, (0.5, 0.5))
    with pytest.raises(ValueError):
        build_bump("Q", 1.0)


def test_dipole_potential_is_harmonic_outside_support():
    n = 128
    center, radius = (0.5, 0.5), 0.1
    theta, source = dipole_potential(center, (1.0, 0.0), radius, n)
    lap = laplacian(theta)
    assert np.abs(lap - source).max() <= 1e-10 * np.abs(source).max()
    pts = np.stack(grid_coords(n), -1)
    outside = torus_dist(pts.reshape(-1, 2), np.array(center)).reshape(n, n) >= radius
    assert np.abs(lap[outside]).max() <= 1e-10 * np.abs(lap).max()
    assert abs(theta.mean()) <= 1e-14


def test_slab_potential_gradient_is_normal_outside():
    slab = Slab((1, 0), 0.0, 0.1)
    n = 256
    g = gradient(slab_potential(slab, n))
    off = np.abs(slab.signed_offset(np.stack(grid_coords(n), -1)))
    assert np.abs(g[off > slab.half_width] - slab.normal).max() <= 1e-8


def test_slab_too_thin_is_rejected():
    with pytest.raises(SynthesisError):
        slab_potential(Slab((1, 0), 0.0, 0.005), 64)


def test_critical_cells_counts_a_vortex():
    n = 32
    a, b = grid_coords(n)
    vortex = np.stack([a - 0.5 + 0.5 / n, b - 0.5 + 0.5 / n], -1)
    assert critical_cells(vortex) >= 1
    assert critical_cells(np.broadcast_to([1.0, 0.3], (n, n, 2)).copy()) == 0


def test_sweep_slab_candidate():
    slab = Slab((1, 0), 0.0, 0.1)
    sw = build_sweep((0.5, 0.5), 0.2, 256, slab=slab)
    assert sw.kind == "slab" and sw.min_norm == 1.0
    assert sw.certificate["slab_gradient_error"] <= 1e-8
    # the dipole alone always has a critical point on the torus
    with pytest.raises(SynthesisError):
        build_sweep((0.5, 0.5), 0.2, 128)


def test_sweep_rejects_large_radius():
    with pytest.raises(ValueError):
        build_sweep((0.5, 0.5), 0.3, 64)


def test_accelerator_kick_closed_form_and_contract():
    slab = Slab((1, 0), 0.0, 0.1)
    sw = build_sweep((0.5, 0.5), 0.2, 256, slab=slab)
    M, tau, H_sup = 2.0, 1.0 / 3, 0.0
    res = build_accelerator(sw, tau, M, H_sup, start=0.0, n_x=6, n_radii=3, n_angles=8)
    assert res.kick_constant == pytest.approx((2 * M + 3 + tau * H_sup) / sw.min_norm, rel=1e-15)
    assert res.certificate["min_final_speed"] > M + 1
    assert res.M_tilde > res.certificate["max_final_speed"]
    assert res.tau_prime <= tau / 2


def test_hyperplane_control_reaches_gamma3():
    slab = Slab((1, 0), 0.0, 0.1)
    T = 1.0
    ctl = build_hyperplane_control(slab, T, n=256, n_x=4, v_cap=2.0, n_radii=2, n_angles=8)
    assert math.log2(ctl.mu) == int(math.log2(ctl.mu))
    # E-bar is exactly mu Y(t) n_H outside the slab
    term = ctl.term()
    y = build_bump("Y", T)
    for t in (0.4, 0.5, 0.6):
        assert float(term.amplitude(t)) == pytest.approx(ctl.mu * float(y(t)), rel=1e-12)
    rng = np.random.default_rng(3)
    x, v = rng.random((40, 2)), rng.uniform(-2, 2, (40, 2)) * 0.7
    hits = first_class_hits(ctl.e_field(), BoundaryAtlas.slab_pair(slab), x, v, 0.0, 5 * T / 6,
                            (T / 6, 5 * T / 6), GAMMA3, slab.half_width / 5)
    assert np.isfinite(hits).mean() >= 0.9


def small_reference(n=64):
    theta, source = dipole_potential((0.5, 0.5), (1.0, 0.0), 0.1, n)
    term = PotentialTerm("pulse0", theta, None, 2.0, 0.2, 0.5, _lap=source)
    term.drive = term.grad
    const = PotentialTerm("accelerator", np.zeros((n, n)), np.array([1.0, 0.0]), 3.0, 0.4, 0.2)
    return ReferenceControl("local-bounded", 1.0, (0.5, 0.5), 0.2, [term, const], Slab((1, 0), 0.0, 0.1),
                            {"M": 1.0, "M_tilde": 2.0}, {"note": np.float64(1.5)}, n)


def test_reference_round_trip(tmp_path):
    ref = small_reference()
    ref.save(tmp_path / "ref")
    back = ReferenceControl.load(tmp_path / "ref")
    assert back.thresholds == ref.thresholds and back.certificates == {"note": 1.5}
    for t in (0.0, 0.35, 0.5, 0.95):
        assert np.array_equal(back.rho(t), ref.rho(t))
        assert np.array_equal(back.e_field_grid(t), ref.e_field_grid(t))
    assert back.slab == ref.slab


def test_reference_invariants_small():
    ref = small_reference()
    inv = ref.check_invariants(n_times=33)
    assert inv["harmonic_rel"] <= 1e-10
    assert inv["endpoint_sup"] == 0.0
    assert ref.control_region() == Region(balls=(Ball((0.5, 0.5), 0.4),), slabs=(Slab((1, 0), 0.0, 0.2),))


@pytest.mark.skipif(not (CACHED_BOUNDED / "manifest.json").exists(), reason="no cached reference")
def test_cached_bounded_reference_invariants():
    ref = ReferenceControl.load(CACHED_BOUNDED)
    inv = ref.check_invariants(n_times=25)
    assert inv["harmonic_rel"] <= 1e-10
    assert inv["e_match_rel"] <= 1e-10
    assert inv["endpoint_sup"] == 0.0

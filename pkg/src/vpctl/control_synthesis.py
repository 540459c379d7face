"""Reference controls for the return method.

Everything here is built from two spatial shapes evaluated on a periodic grid:

* compact dipoles: the potential of ``moment . grad(beta)`` for a smooth bump
  ``beta`` supported in a small ball; the source is sampled on the grid and
  inverted spectrally, so the grid Laplacian vanishes identically outside
  the bump support;
* slab potentials: ``theta_H(x) = Phi(x . (p, q) - c)`` whose gradient equals
  the slab normal away from the slab, built from exact grid Fourier modes.

Time dependence is always ``scale * Lambda((t - start) / width)`` so every
schedule has compact support and serializes as a handful of numbers.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import quad

from .absorption_transport import GAMMA4, BoundaryAtlas, smoothstep
from .characteristics import SphereSurface, propagate
from .fields import (ForceField, GridTerm, MagneticField, MagneticProfile,
                     SeparableGridField, ZeroField)
from .poisson_spectral import gradient, laplacian, load_grid_binary, sample_field, save_grid_binary, solve_poisson
from .torus_geometry import Ball, GccCertificate, Region, Slab, grid_coords, min_image, torus_dist

GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0
SWEEP_MIN_NORM = 1e-3
DEFAULT_GRID = 256


class SynthesisError(RuntimeError):
    """A builder could not certify its contract; ``details`` carries the measurements."""

    def __init__(self, stage: str, message: str, details: dict | None = None):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.details = details or {}


# ------------------------------------------------------------------ bumps


def mollifier(s):
    s = np.asarray(s, dtype=float)
    inside = (s > 0) & (s < 1)
    out = np.zeros(s.shape)
    si = s[inside]
    out[inside] = np.exp(-1.0 / (si * (1.0 - si)))
    return out


_LAMBDA_MASS = quad(lambda s: float(mollifier(s)), 0.0, 1.0, epsabs=1e-15, epsrel=1e-13)[0]
_Z_MASS = quad(lambda r: 2 * math.pi * r * math.exp(-1.0 / (1.0 - r * r)), 0.0, 1.0,
               epsabs=1e-15, epsrel=1e-13)[0]


def unit_bump(s):
    """Lambda: smooth, supported in (0, 1), unit integral."""
    return mollifier(s) / _LAMBDA_MASS


def unit_bump_derivative(s):
    s = np.asarray(s, dtype=float)
    inside = (s > 0) & (s < 1)
    out = np.zeros(s.shape)
    si = s[inside]
    q = si * (1.0 - si)
    out[inside] = np.exp(-1.0 / q) * (1.0 - 2.0 * si) / q ** 2 / _LAMBDA_MASS
    return out


def velocity_bump(v):
    """Z: radial bump in the unit velocity ball with unit integral over R^2."""
    v = np.asarray(v, dtype=float)
    r2 = np.sum(v * v, axis=-1)
    out = np.zeros(r2.shape)
    inside = r2 < 1
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside])) / _Z_MASS
    return out


def velocity_bump_gradient(v):
    v = np.asarray(v, dtype=float)
    r2 = np.sum(v * v, axis=-1)
    z = velocity_bump(v)
    fac = np.zeros(r2.shape)
    inside = r2 < 1
    fac[inside] = -2.0 / (1.0 - r2[inside]) ** 2
    return (z * fac)[..., None] * v


@dataclass
class BumpProfile:
    kind: str
    support: tuple[float, float]
    fn: object
    integral: float | None = None

    def __call__(self, t):
        return self.fn(t)


def build_bump(kind: str, horizon: float | None = None, window: tuple[float, float] | None = None) -> BumpProfile:
    """Z, Lambda, Upsilon, Upsilon-tilde or Y.

    The time windows of Upsilon (0 up to T/48, 1 on [T/24, 23T/24]) and
    Upsilon-tilde (0 up to T/100, 1 from T/48) are fixed fractions of the horizon.
    """
    if kind == "Z":
        return BumpProfile("Z", (0.0, 1.0), velocity_bump, 1.0)
    if kind == "Lambda":
        return BumpProfile("Lambda", (0.0, 1.0), unit_bump, 1.0)
    if horizon is None or not horizon > 0:
        raise ValueError(f"bump {kind} needs a positive horizon")
    T = float(horizon)
    if kind == "Upsilon":
        a0, a1, b1, b0 = T / 48, T / 24, 23 * T / 24, 47 * T / 48

        def ups(t):
            t = np.asarray(t, dtype=float)
            return smoothstep((t - a0) / (a1 - a0)) * smoothstep((b0 - t) / (b0 - b1))

        return BumpProfile(kind, (a0, b0), ups)
    if kind == "Upsilon_tilde":
        a0, a1 = T / 100, T / 48

        def ups2(t):
            return smoothstep((np.asarray(t, dtype=float) - a0) / (a1 - a0))

        return BumpProfile(kind, (a0, math.inf), ups2)
    if kind == "Y":
        a, b = window if window is not None else (T / 3, 2 * T / 3)
        if not b > a:
            raise ValueError("degenerate window for Y")
        width = b - a
        return BumpProfile(kind, (a, b), lambda t: unit_bump((np.asarray(t, float) - a) / width) / width, 1.0)
    raise ValueError(f"unknown bump kind {kind!r}")


# -------------------------------------------------------------- potentials


def _offsets(center, n):
    g1, g2 = grid_coords(n)
    return min_image(g1 - center[0]), min_image(g2 - center[1])


def dipole_potential(center, moment, support_radius: float, n: int = DEFAULT_GRID):
    """Potential of the compact dipole source ``moment . grad(beta)``.

    ``beta`` is the radial mollifier of radius ``support_radius`` normalized to
    unit grid mass. Returns (theta, source) with laplacian(theta) = source.
    """
    d1, d2 = _offsets(center, n)
    r2 = (d1 ** 2 + d2 ** 2) / support_radius ** 2
    inside = r2 < 1
    beta = np.zeros((n, n))
    dbeta = np.zeros((n, n))  # d beta / d(r2)
    q = 1.0 - r2[inside]
    beta[inside] = np.exp(-1.0 / q)
    dbeta[inside] = -beta[inside] / q ** 2
    mass = beta.sum() / n ** 2
    if mass <= 0:
        raise ValueError("dipole support smaller than the grid spacing")
    scale = 2.0 / (support_radius ** 2 * mass)
    source = scale * dbeta * (moment[0] * d1 + moment[1] * d2)
    source -= source.mean()
    theta = solve_poisson(source)
    return theta, source


def slab_potential(slab: Slab, n: int = DEFAULT_GRID, width_fraction: float = 1.0 / 8.0,
                   tail_tol: float = 1e-10):
    """theta_H with grad theta_H = n_H outside the slab, as an exact grid Fourier sum.

    Along u = x.(p, q) - c the derivative is (1 - beta(u))/|(p, q)| with beta a
    periodized Gaussian of width width_fraction * half_width (in distance units).
    Raises when the grid cannot resolve the Gaussian or the Gaussian leaks out
    of the slab by more than ``tail_tol``.
    """
    p, q = slab.direction
    ell = math.hypot(p, q)
    sigma_u = width_fraction * slab.half_width * ell
    m_max = (n // 2 - 1) // max(abs(p), abs(q))
    spectral_tail = math.exp(-2 * math.pi ** 2 * (m_max + 1) ** 2 * sigma_u ** 2)
    spatial_tail = math.exp(-0.5 / width_fraction ** 2)
    if spectral_tail > tail_tol or spatial_tail > tail_tol:
        raise SynthesisError("slab", "slab too thin for the grid",
                             {"spectral_tail": spectral_tail, "spatial_tail": spatial_tail,
                              "m_max": m_max, "n": n})
    g1, g2 = grid_coords(n)
    u = p * g1 + q * g2 - slab.offset
    theta = np.zeros((n, n))
    for m in range(1, m_max + 1):
        decay = math.exp(-2 * math.pi ** 2 * m * m * sigma_u ** 2)
        theta -= (2.0 * decay / ell) / (2 * math.pi * m) * np.sin(2 * math.pi * m * u)
    return theta - theta.mean()


def critical_cells(vec: np.ndarray, mask: np.ndarray | None = None) -> int:
    """Number of grid cells around which the vector field winds (a zero inside)."""
    ang = np.arctan2(vec[..., 1], vec[..., 0])

    def step(a, b):
        return (b - a + np.pi) % (2 * np.pi) - np.pi

    c00 = ang
    c10 = np.roll(ang, -1, axis=0)
    c11 = np.roll(c10, -1, axis=1)
    c01 = np.roll(ang, -1, axis=1)
    wind = step(c00, c10) + step(c10, c11) + step(c11, c01) + step(c01, c00)
    hits = np.abs(wind) > np.pi
    if mask is not None:
        hits &= mask
    return int(hits.sum())


# ------------------------------------------------------------- sweep field


@dataclass
class SweepField:
    kind: str
    theta: np.ndarray
    drive: np.ndarray  # (N, N, 2) grid or constant (2,) vector
    min_norm: float
    source_region: Region
    certificate: dict = field(default_factory=dict)


def build_sweep(x0, r0: float, n: int = DEFAULT_GRID, slab: Slab | None = None,
                dipole_moment=(1.0, 0.0)) -> SweepField:
    """Harmonic sweep potential with a nonvanishing drive field.

    The dipole candidate is always measured: its gradient outside B(x0, r0)
    must stay above the threshold and wind around no grid cell. The slab
    candidate (drive = slab normal, exactly) is used when a slab is supplied.
    """
    if not r0 < 0.25:
        raise ValueError("r0 must be below 1/4")
    x0 = np.asarray(x0, dtype=float)
    theta, _ = dipole_potential(x0, np.asarray(dipole_moment, float) / np.linalg.norm(dipole_moment),
                                r0 / 2, n)
    grad = gradient(theta)
    norm = np.linalg.norm(grad, axis=-1)
    d1, d2 = _offsets(x0, n)
    outside = (d1 ** 2 + d2 ** 2) >= r0 ** 2
    measured = {
        "dipole_min_norm": float(norm[outside].min()),
        "dipole_max_norm": float(norm[outside].max()),
        "dipole_critical_cells": critical_cells(grad, outside),
    }
    dipole_ok = measured["dipole_min_norm"] >= SWEEP_MIN_NORM and measured["dipole_critical_cells"] == 0
    if dipole_ok and slab is None:
        # accepted only if the gradient itself is already a nonvanishing drive
        if critical_cells(grad) == 0 and norm.min() >= SWEEP_MIN_NORM:
            return SweepField("dipole", theta, grad, float(norm.min()),
                              Region(balls=(Ball(tuple(x0), r0),)), measured)
    if slab is None:
        raise SynthesisError("sweep", "no candidate certified", measured)
    theta_h = slab_potential(slab, n)
    g = gradient(theta_h)
    off = np.abs(slab.signed_offset(np.stack(grid_coords(n), -1)))
    out_slab = off > slab.half_width
    err = float(np.linalg.norm(g[out_slab] - slab.normal, axis=-1).max())
    measured.update({"slab_gradient_error": err, "slab_min_norm": 1.0})
    if err > 1e-8:
        raise SynthesisError("sweep", "slab potential gradient differs from the normal", measured)
    return SweepField("slab", theta_h, slab.normal.copy(), 1.0, Region(slabs=(slab,)), measured)


# ------------------------------------------------------------ term storage


@dataclass
class PotentialTerm:
    """scale * Lambda((t - start)/width) applied to (theta, drive)."""

    name: str
    theta: np.ndarray
    drive: np.ndarray
    scale: float
    start: float
    width: float
    _grad: np.ndarray | None = field(default=None, repr=False)
    _lap: np.ndarray | None = field(default=None, repr=False)

    @property
    def end(self) -> float:
        return self.start + self.width

    def amplitude(self, t):
        return self.scale * unit_bump((np.asarray(t, dtype=float) - self.start) / self.width)

    def amplitude_rate(self, t):
        return self.scale / self.width * unit_bump_derivative((np.asarray(t, dtype=float) - self.start) / self.width)

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = gradient(self.theta)
        return self._grad

    @property
    def lap(self) -> np.ndarray:
        if self._lap is None:
            self._lap = laplacian(self.theta)
        return self._lap

    def amp_sup(self) -> float:
        return self.scale * float(unit_bump(0.5))

    def drive_term(self, substeps=48) -> GridTerm:
        return GridTerm(self.amplitude, self.drive, self.start, self.end, substeps)

    def gradient_term(self, substeps=48) -> GridTerm:
        return GridTerm(self.amplitude, self.grad, self.start, self.end, substeps)

    def mismatch(self) -> np.ndarray | None:
        """drive - grad theta as a grid, or None when they coincide by construction."""
        if self.drive.ndim == 3 and self.drive is self.grad:
            return None
        d = self.drive if self.drive.ndim == 3 else np.broadcast_to(self.drive, self.grad.shape)
        return d - self.grad


def field_from_terms(terms, which="drive", substeps=48) -> ForceField:
    if not terms:
        return ZeroField()
    grid_terms = [t.drive_term(substeps) if which == "drive" else t.gradient_term(substeps) for t in terms]
    sups = [t.amp_sup() for t in terms]
    return SeparableGridField(grid_terms, amp_sup=sups)


# ------------------------------------------------------------- accelerator


@dataclass
class AcceleratorResult:
    term: PotentialTerm
    kick_constant: float
    tau_prime: float
    M: float
    M_tilde: float
    certificate: dict


def velocity_disc(radius: float, n_radii: int = 8, n_angles: int = 16) -> np.ndarray:
    """0 plus rings at radius*k/n_radii (the outer ring just inside the disc)."""
    out = [np.zeros((1, 2))]
    ang = 2 * np.pi * (np.arange(n_angles) + 0.5) / n_angles
    ring = np.stack([np.cos(ang), np.sin(ang)], 1)
    for k in range(1, n_radii + 1):
        r = radius * k / n_radii
        if k == n_radii:
            r *= 1 - 1e-9
        out.append(r * ring)
    return np.concatenate(out)


def grid_positions(n: int, shift: float = 0.5) -> np.ndarray:
    s = (np.arange(n) + shift) / n
    return np.stack(np.meshgrid(s, s, indexing="ij"), -1).reshape(-1, 2)


def build_accelerator(sweep: SweepField, tau: float, M: float, H_sup: float, *, H: ForceField | None = None,
                      start: float = 0.0, n_x: int = 32, n_radii: int = 8, n_angles: int = 16,
                      extra_forces=(), min_halvings: int = 0) -> AcceleratorResult:
    """Kick every slow particle out of B(0, M+1) within one window of length tau.

    ``extra_forces`` lists alternative perturbations (each tested separately);
    the contract must hold for all of them.
    """
    if not (tau > 0 and M >= 0):
        raise ValueError("accelerator needs tau > 0 and M >= 0")
    H = H if H is not None else ZeroField()
    kick = (2 * M + 3 + tau * H_sup) / sweep.min_norm
    vel = velocity_disc(M, n_radii, n_angles) if M > 0 else np.zeros((1, 2))
    x = np.repeat(grid_positions(n_x), vel.shape[0], axis=0)
    v = np.tile(vel, (n_x * n_x, 1))
    tau_prime = tau / 2
    worst = None
    for k in range(11):
        term = PotentialTerm("accelerator", sweep.theta, sweep.drive, kick / tau_prime, start, tau_prime)
        accel = field_from_terms([term])
        lo, hi = math.inf, 0.0
        for extra in (list(extra_forces) or [ZeroField()]):
            force = H + extra + accel
            _, vf, _, _ = propagate(x, v, force, start, start + tau, dt_max=tau / 256, step_length=1.0)
            sp = np.linalg.norm(vf, axis=1)
            lo, hi = min(lo, sp.min()), max(hi, sp.max())
            worst = (x[np.argmin(sp)].tolist(), v[np.argmin(sp)].tolist(), float(sp.min()))
        if lo > M + 1 and k >= min_halvings:
            cert = {"kick_constant": kick, "tau_prime": tau_prime, "min_final_speed": lo,
                    "max_final_speed": hi, "samples": int(x.shape[0]), "halvings": k}
            return AcceleratorResult(term, kick, tau_prime, M, 1.05 * hi, cert)
        tau_prime /= 2
        if tau_prime < tau / 2 ** 10:
            break
    raise SynthesisError("accelerator", "tau' underflow without passing", {"worst": worst})


def verify_accelerator(ref: "ReferenceControl", H: ForceField | None = None, *, n_x: int = 32, n_radii: int = 8,
                       n_angles: int = 16) -> dict:
    """Re-run the accelerator contract of a composed reference on T^2 x (velocity grid over B(0, M)).

    Every final speed at the end of the middle third must lie in (M + 1, M-tilde).
    """
    term = next(t for t in ref.terms if t.name == "accelerator")
    M, M_tilde = float(ref.thresholds["M"]), float(ref.thresholds["M_tilde"])
    tau = ref.horizon / 3
    H = H if H is not None else ZeroField()
    vel = velocity_disc(M, n_radii, n_angles)
    x = np.repeat(grid_positions(n_x), vel.shape[0], axis=0)
    v = np.tile(vel, (n_x * n_x, 1))
    force = H + field_from_terms([term])
    _, vf, _, _ = propagate(x, v, force, tau, 2 * tau, dt_max=tau / 256, step_length=1.0)
    sp = np.linalg.norm(vf, axis=1)
    ok = (sp > M + 1) & (sp < M_tilde)
    return {"samples": int(sp.size), "fraction": float(ok.mean()), "min_speed": float(sp.min()),
            "max_speed": float(sp.max()), "M": M, "M_tilde": M_tilde, "passed": bool(ok.all())}


# ------------------------------------------------------ high-velocity pulse


@dataclass
class PulseResult:
    terms: list
    m_low: float
    tau_prime: float
    certificate: dict


def pulse_terms(x0, r0: float, tau: float, start: float, strength: float, n: int = DEFAULT_GRID,
                tau_prime: float | None = None) -> list:
    """Time-compressed, time-centred two-stage dipole pulse.

    The base pulse on unit time applies a golden-direction dipole during the
    first half and the orthogonal one during the second half, each with
    amplitude ``4*strength*Lambda``; compression by tau' multiplies by 1/tau'^2.

    The dipole support radius is r0/8. A fast particle on a nearly closed
    geodesic only feels the line average of the kick, and that average has a
    stable equilibrium inside the support band; keeping the band thinner than
    the visit ball B(x0, r0/4) puts the equilibrium inside the ball's shadow.
    """
    tau_prime = tau / 3 if tau_prime is None else tau_prime
    p = np.array([1.0, GOLDEN]) / math.hypot(1.0, GOLDEN)
    q = np.array([-p[1], p[0]])
    t_a = start + (tau - tau_prime) / 2
    half = tau_prime / 2
    out = []
    for k, moment in enumerate((p, q)):
        theta, source = dipole_potential(x0, moment, r0 / 8, n)
        term = PotentialTerm(f"pulse{k}", theta, None, 4 * strength / tau_prime ** 2,
                             t_a + k * half, half, _lap=source)
        term.drive = term.grad
        out.append(term)
    return out


def fan_states(n_pts: int, n_dirs: int, speeds, shift: float = 0.5):
    pts = grid_positions(n_pts, shift)
    ang = 2 * np.pi * (np.arange(n_dirs) + 0.5) / n_dirs
    dirs = np.stack([np.cos(ang), np.sin(ang)], 1)
    xs, vs = [], []
    for s in speeds:
        xs.append(np.repeat(pts, n_dirs, axis=0))
        vs.append(np.tile(dirs, (pts.shape[0], 1)) * s)
    return np.concatenate(xs), np.concatenate(vs)


def rational_states(n_pts: int, speeds, max_index: int = 4, transverse=(-2.0, 0.0, 2.0)):
    """Near-closed-geodesic movers: directions (a, b) with |a|, |b| <= max_index,
    plus a small velocity offset across the direction.

    These are the hardest states for a pulse whose effect on them is only
    the line average of the kick.
    """
    pairs = sorted({(a // math.gcd(a, b), b // math.gcd(a, b))
                    for a in range(-max_index, max_index + 1) for b in range(-max_index, max_index + 1)
                    if (a, b) != (0, 0)})
    dirs = np.array(pairs, dtype=float)
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    perp = np.stack([-dirs[:, 1], dirs[:, 0]], 1)
    # an irrational shift keeps the positions off the symmetry lines of x0
    pts = (grid_positions(n_pts, 0.5) + np.array([0.1213, 0.3709])) % 1.0
    xs, vs = [], []
    for s in speeds:
        for w in transverse:
            vel = s * dirs + w * perp
            xs.append(np.repeat(pts, len(dirs), axis=0))
            vs.append(np.tile(vel, (pts.shape[0], 1)))
    return np.concatenate(xs), np.concatenate(vs)


def pulse_states(n_pts: int, n_dirs: int, m: float):
    """Certification sample of the pulse contract at threshold m."""
    xf, vf = fan_states(n_pts, n_dirs, (m, 2 * m))
    xr, vr = rational_states(max(n_pts // 2, 2), (m, 2 * m))
    return np.concatenate([xf, xr]), np.concatenate([vf, vr])


def visit_check(force: ForceField, x0, radius: float, x, v, t0: float, window: tuple[float, float],
                min_speed: float, r_outer: float, speed_band: tuple[float, float] | None = None,
                stop_on_visit: bool = True):
    """Which states enter B(x0, radius) during ``window`` with speed >= min_speed.

    With ``speed_band = (lo, hi)`` the run continues to the end of the window
    and also records whether lo*|v| <= |V| <= hi*|v| held at every step.
    Returns (visited, band_ok) boolean arrays.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    p = x.shape[0]
    visited = np.zeros(p, dtype=bool)
    inside0 = torus_dist(x, x0) < radius
    band_ok = np.ones(p, dtype=bool)
    v0 = np.linalg.norm(v, axis=1)
    surfaces = [SphereSurface(np.asarray(x0, float), radius), SphereSurface(np.asarray(x0, float), r_outer)]

    def on_event(batch):
        sp = np.linalg.norm(batch.v, axis=1)
        ok = ((batch.surface == 0) & batch.entering & (batch.t > window[0]) & (batch.t < window[1])
              & (sp >= min_speed))
        visited[batch.index[ok]] = True
        return ok if (stop_on_visit and speed_band is None) else None

    def on_step(idx, tn, xn, vn):
        inside = (torus_dist(xn, x0) < radius) & (tn > window[0]) & (tn < window[1])
        sp = np.linalg.norm(vn, axis=1)
        visited[idx[inside & (sp >= min_speed)]] = True
        if speed_band is not None:
            lo, hi = speed_band
            band_ok[idx[(sp < lo * v0[idx]) | (sp > hi * v0[idx])]] = False

    step_floor = radius / 5
    propagate(x, v, force, t0, window[1], dt_max=(window[1] - t0) / 64, step_length=step_floor,
              max_length=0.5, surfaces=surfaces, on_event=on_event, on_step=on_step)
    del inside0
    return visited, band_ok


def build_high_velocity_pulse(x0, r0: float, tau: float, H: ForceField | None = None, *, start: float = 0.0,
                              strength: float = 4.0, n: int = DEFAULT_GRID, n_pts: int = 8, n_dirs: int = 64,
                              m_start: float = 1.0, m_cap: float = 2.0 ** 16, log=None) -> PulseResult:
    """Pulse plus the certified speed threshold of the high-velocity visit contract.

    m doubles from ``m_start`` until every sampled state (the fan of n_pts^2
    points by n_dirs directions plus the rational-direction movers, speeds
    near m and 2m) enters B(x0, r0/4) during the middle
    third of the window with speed at least m/2.
    """
    H = H if H is not None else ZeroField()
    terms = pulse_terms(x0, r0, tau, start, strength, n)
    force = H + field_from_terms(terms)
    window = (start + tau / 3, start + 2 * tau / 3)
    m = float(m_start)
    history = []
    while m <= m_cap:
        x, v = pulse_states(n_pts, n_dirs, m)
        visited, _ = visit_check(force, x0, r0 / 4, x, v, start, window, m / 2, r0)
        history.append((m, float(visited.mean())))
        if log:
            log(f"pulse m={m:g} visited={visited.mean():.4f}")
        if visited.all():
            cert = {"m_low": m, "samples": int(x.shape[0]), "n_pts": n_pts, "n_dirs": n_dirs,
                    "strength": strength, "history": history}
            return PulseResult(terms, m, tau / 3, cert)
        bad = np.flatnonzero(~visited)
        worst = {"x": x[bad[0]].tolist(), "v": v[bad[0]].tolist(), "missed": int(bad.size)}
        m *= 2
    raise SynthesisError("pulse", "speed threshold search exceeded the cap", {"worst": worst, "history": history})


def recheck_pulse(force: ForceField, x0, r0: float, tau: float, start: float, m_low: float, count: int,
                  seed: int = 0):
    """Fresh random states with speeds in [m, 2m]; returns the visited mask."""
    rng = np.random.default_rng(seed)
    x = rng.random((count, 2))
    ang = rng.uniform(0, 2 * np.pi, count)
    sp = rng.uniform(m_low, 2 * m_low, count)
    v = sp[:, None] * np.stack([np.cos(ang), np.sin(ang)], 1)
    window = (start + tau / 3, start + 2 * tau / 3)
    visited, _ = visit_check(force, x0, r0 / 4, x, v, start, window, m_low / 2, r0)
    return visited, x, v


# --------------------------------------------------------- reference control


@dataclass
class ReferenceControl:
    variant: str
    horizon: float
    x0: tuple
    r0: float
    terms: list
    slab: Slab | None
    thresholds: dict = field(default_factory=dict)
    certificates: dict = field(default_factory=dict)
    grid: int = DEFAULT_GRID

    # -- geometry
    def source_region(self) -> Region:
        return Region(balls=(Ball(tuple(self.x0), self.r0),), slabs=(self.slab,) if self.slab else ())

    def control_region(self) -> Region:
        """The control zone this reference needs: B(x0, 2 r0) plus the doubled slab."""
        slabs = (self.slab.widened(2.0),) if self.slab else ()
        return Region(balls=(Ball(tuple(self.x0), 2 * self.r0),), slabs=slabs)

    def sphere_atlas(self) -> BoundaryAtlas:
        return BoundaryAtlas.sphere(self.x0, self.r0)

    # -- schedules
    def active(self, t):
        return [term for term in self.terms if term.start < t < term.end]

    def phi(self, t: float) -> np.ndarray:
        out = np.zeros((self.grid, self.grid))
        for term in self.active(t):
            out += float(term.amplitude(t)) * term.theta
        return out

    def rho(self, t: float) -> np.ndarray:
        out = np.zeros((self.grid, self.grid))
        for term in self.active(t):
            out += float(term.amplitude(t)) * term.lap
        return out

    def rho_rate(self, t: float) -> np.ndarray:
        out = np.zeros((self.grid, self.grid))
        for term in self.active(t):
            out += float(term.amplitude_rate(t)) * term.lap
        return out

    def e_field_grid(self, t: float) -> np.ndarray:
        out = np.zeros((self.grid, self.grid, 2))
        for term in self.active(t):
            out += float(term.amplitude(t)) * term.drive
        return out

    def grad_phi_grid(self, t: float) -> np.ndarray:
        out = np.zeros((self.grid, self.grid, 2))
        for term in self.active(t):
            out += float(term.amplitude(t)) * term.grad
        return out

    def e_field(self) -> ForceField:
        return field_from_terms(self.terms, "drive")

    def grad_phi_field(self) -> ForceField:
        return field_from_terms(self.terms, "grad")

    def correction_field(self) -> ForceField:
        """E-bar minus grad phi-bar, nonzero only where a drive departs from its gradient."""
        parts = [t for t in self.terms if t.mismatch() is not None]
        if not parts:
            return ZeroField()
        grid_terms = [GridTerm(t.amplitude, t.mismatch(), t.start, t.end) for t in parts]
        return SeparableGridField(grid_terms, amp_sup=[t.amp_sup() for t in parts])

    def reference_force(self, F: ForceField | None) -> ForceField:
        return (F if F is not None else ZeroField()) + self.e_field()

    def fbar(self, t: float, x, v) -> np.ndarray:
        return velocity_bump(v) * sample_field(self.rho(t), x)

    def time_knots(self, count: int = 64) -> np.ndarray:
        return np.linspace(0.0, self.horizon, count)

    # -- certificates
    def check_invariants(self, n_times: int = 97) -> dict:
        """Harmonicity, E = grad phi and compact time support, measured on the grid.

        Residuals are reported both absolutely and relative to the largest
        value of the same quantity at that time.
        """
        n = self.grid
        pts = np.stack(grid_coords(n), -1)
        outside = ~self.source_region().contains(pts)
        harm_abs = harm_rel = match_abs = match_rel = 0.0
        for t in np.linspace(0, self.horizon, n_times):
            lap = self.rho(t)
            scale = max(np.abs(lap).max(), 1e-300)
            harm_abs = max(harm_abs, float(np.abs(lap[outside]).max()))
            harm_rel = max(harm_rel, float(np.abs(lap[outside]).max()) / scale)
            diff = self.e_field_grid(t) - self.grad_phi_grid(t)
            e_scale = max(np.linalg.norm(self.e_field_grid(t), axis=-1).max(), 1e-300)
            d = float(np.linalg.norm(diff[outside], axis=-1).max())
            match_abs = max(match_abs, d)
            match_rel = max(match_rel, d / e_scale)
        ends = max(float(np.abs(self.phi(0.0)).max()), float(np.abs(self.phi(self.horizon)).max()),
                   float(np.abs(self.e_field_grid(0.0)).max()), float(np.abs(self.e_field_grid(self.horizon)).max()))
        return {"harmonic_abs": harm_abs, "harmonic_rel": harm_rel, "e_match_abs": match_abs,
                "e_match_rel": match_rel, "endpoint_sup": ends}

    def gbar_residual(self, t: float, F: ForceField | None, velocities) -> dict:
        """Evaluate the source term of f-bar on the grid for the given velocities.

        Returns the sup of |G-bar| outside the source region and overall.
        """
        n = self.grid
        pts = np.stack(grid_coords(n), -1).reshape(-1, 2)
        outside = ~self.source_region().contains(pts)
        rho = self.rho(t).reshape(-1)
        rate = self.rho_rate(t).reshape(-1)
        grad_rho = gradient(self.rho(t)).reshape(-1, 2)
        gphi = self.grad_phi_grid(t).reshape(-1, 2)
        F = F if F is not None else ZeroField()
        out_sup = all_sup = 0.0
        for v in np.atleast_2d(velocities):
            vv = np.broadcast_to(v, pts.shape)
            z = float(velocity_bump(v))
            gz = velocity_bump_gradient(v)
            force = F(t, pts, vv) + gphi
            g = z * (rate + grad_rho @ v) + rho * (force @ gz)
            all_sup = max(all_sup, float(np.abs(g).max()))
            out_sup = max(out_sup, float(np.abs(g[outside]).max()))
        return {"outside_sup": out_sup, "sup": all_sup}

    # -- serialization
    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {
            "schema": 1, "variant": self.variant, "horizon": self.horizon, "x0": list(self.x0),
            "r0": self.r0, "grid": self.grid,
            "slab": None if self.slab is None else {"direction": list(self.slab.direction),
                                                     "offset": self.slab.offset,
                                                     "half_width": self.slab.half_width},
            "thresholds": self.thresholds, "certificates": _jsonable(self.certificates), "terms": [],
        }
        for k, term in enumerate(self.terms):
            entry = {"name": term.name, "scale": term.scale, "start": term.start, "width": term.width,
                     "theta": f"term{k}_theta.bin", "source": f"term{k}_source.bin"}
            save_grid_binary(d / entry["theta"], term.theta)
            save_grid_binary(d / entry["source"], term.lap)
            if term.drive is term.grad:
                entry["drive"] = "gradient"
            elif term.drive.ndim == 1:
                entry["drive"] = list(map(float, term.drive))
            else:
                entry["drive"] = f"term{k}_drive.bin"
                save_grid_binary(d / entry["drive"], term.drive)
            manifest["terms"].append(entry)
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory) -> "ReferenceControl":
        d = Path(directory)
        m = json.loads((d / "manifest.json").read_text())
        terms = []
        for e in m["terms"]:
            theta = load_grid_binary(d / e["theta"])
            term = PotentialTerm(e["name"], theta, None, e["scale"], e["start"], e["width"],
                                 _lap=load_grid_binary(d / e["source"]))
            if e["drive"] == "gradient":
                term.drive = term.grad
            elif isinstance(e["drive"], list):
                term.drive = np.array(e["drive"], dtype=float)
            else:
                term.drive = load_grid_binary(d / e["drive"])
            terms.append(term)
        slab = None
        if m["slab"]:
            slab = Slab(tuple(m["slab"]["direction"]), m["slab"]["offset"], m["slab"]["half_width"])
        return cls(m["variant"], m["horizon"], tuple(m["x0"]), m["r0"], terms, slab,
                   m["thresholds"], m["certificates"], m["grid"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


# ------------------------------------------------------------ compositions


def rendezvous_states(count: int, v_cap: float, ring_speed: float, seed: int = 0, ring_fraction: float = 0.2):
    """Random positions with velocities uniform in B(0, v_cap) plus a fast ring."""
    rng = np.random.default_rng(seed)
    n_ring = int(round(count * ring_fraction))
    n_disc = count - n_ring
    x = rng.random((count, 2))
    r = v_cap * np.sqrt(rng.random(n_disc))
    a = rng.uniform(0, 2 * np.pi, count)
    speeds = np.concatenate([r, np.full(n_ring, ring_speed)])
    v = speeds[:, None] * np.stack([np.cos(a), np.sin(a)], 1)
    return x, v


def first_class_hits(force: ForceField, atlas: BoundaryAtlas, x, v, t0: float, t1: float,
                     window: tuple[float, float], min_code: int, step_floor: float, on_step=None):
    """Time of the first inward crossing of class >= min_code inside ``window`` (NaN if none)."""
    x = np.asarray(x, dtype=float)
    hit_t = np.full(x.shape[0], np.nan)

    def on_event(batch):
        codes = np.zeros(batch.index.size, dtype=int)
        inward = batch.entering
        if inward.any():
            codes[inward] = atlas.classify(batch.x[inward], batch.v[inward], check=False)
        ok = inward & (codes >= min_code) & (batch.t >= window[0]) & (batch.t <= window[1])
        hit_t[batch.index[ok]] = batch.t[ok]
        return ok

    propagate(x, v, force, t0, t1, dt_max=(t1 - t0) / 96, step_length=step_floor, max_length=0.5,
              surfaces=[atlas.surface], on_event=on_event, on_step=on_step)
    return hit_t


def step_one_check(force: ForceField, x0, r0: float, T: float, x, v):
    """Every state must enter the fast, steep class on S(x0, r0) in [T/12, 3T/12] or [9T/12, 11T/12]."""
    atlas = BoundaryAtlas.sphere(x0, r0)
    t_hit = first_class_hits(force, atlas, x, v, 0.0, 11 * T / 12, (T / 12, 11 * T / 12), GAMMA4, r0 / 10)
    ok = np.isfinite(t_hit) & ((t_hit <= 3 * T / 12) | (t_hit >= 9 * T / 12))
    return ok, t_hit


def speed_gain(force: ForceField, t0: float, t1: float, speed: float, n_x: int = 8, n_radii: int = 8,
               n_angles: int = 16) -> float:
    """Largest final speed from states in T^2 x B(0, speed)."""
    vel = velocity_disc(speed, n_radii, n_angles)
    x = np.repeat(grid_positions(n_x), vel.shape[0], axis=0)
    v = np.tile(vel, (n_x * n_x, 1))
    _, vf, _, _ = propagate(x, v, force, t0, t1, dt_max=(t1 - t0) / 256, step_length=0.25)
    return float(np.linalg.norm(vf, axis=1).max())


def default_slab(x0, r0: float, half_width: float = 0.075) -> Slab:
    """Vertical slab on the line x1 = x0_1 + 1/2, as far from the ball as possible."""
    return Slab((1, 0), float((x0[0] + 0.5) % 1.0), half_width)


def compose_reference_bounded(T: float, F: ForceField | None, x0, r0: float, *, slab: Slab | None = None,
                              n: int = DEFAULT_GRID, strength: float = 4.0, n_pts: int = 8, n_dirs: int = 64,
                              step_one_samples: int = 1500, seed: int = 0, log=None) -> ReferenceControl:
    """Pulse on the first and last thirds, accelerator on the middle third.

    The thresholds follow a two-pass order: both pulses first, then alpha, then M.
    The geometric constant multiplying the force bounds in alpha is found by
    doubling until the sampled entry argument of the relevance lemma passes.
    """
    F = F if F is not None else ZeroField()
    x0 = tuple(float(c) for c in x0)
    slab = slab if slab is not None else default_slab(x0, r0)
    tau = T / 3
    F_sup = float(F.sup_norm)
    if not math.isfinite(F_sup):
        raise SynthesisError("compose", "external force needs a finite sup-norm bound")
    try:
        sweep = build_sweep(x0, r0, n, slab)
    except SynthesisError as exc:
        raise SynthesisError("sweep", str(exc), exc.details) from exc
    p1 = build_high_velocity_pulse(x0, r0, tau, F, start=0.0, strength=strength, n=n, n_pts=n_pts,
                                   n_dirs=n_dirs, log=log)
    p3 = build_high_velocity_pulse(x0, r0, tau, F, start=2 * T / 3, strength=strength, n=n, n_pts=n_pts,
                                   n_dirs=n_dirs, m_start=p1.m_low / 4, log=log)
    pulse1 = field_from_terms(p1.terms)
    phi_sup = [max(float(np.abs(t.theta).max()) * t.amp_sup() for t in p.terms) for p in (p1, p3)]
    K = 1 + F_sup + phi_sup[0] + phi_sup[1]
    alpha_floor = 600 * r0 / T
    C = alpha_floor / K
    x_s, v_s = None, None
    for attempt in range(12):
        alpha = max(alpha_floor, C * K)
        low1 = max(p1.m_low, 2 * alpha)
        measured = speed_gain(F + pulse1, 0.0, T / 3, low1)
        M1 = max(low1 + (T / 3) * F_sup, 1.05 * measured)
        M2 = max(p3.m_low, 2 * alpha)
        M = max(M1, M2)
        acc = build_accelerator(sweep, tau, M, F_sup, H=F, start=T / 3)
        terms = p1.terms + [acc.term] + p3.terms
        ref = ReferenceControl("bounded", T, x0, r0, terms, slab, grid=n)
        if x_s is None:
            x_s, v_s = rendezvous_states(step_one_samples, 1.5 * acc.M_tilde, 2 * M, seed=seed)
        ok, _ = step_one_check(ref.reference_force(F), x0, r0, T, x_s, v_s)
        if log:
            log(f"C_r0 trial {C:.4g}: alpha={alpha:.4g} M={M:.4g} step-one pass={ok.mean():.4f}")
        if ok.all():
            ref.thresholds = {"m1": p1.m_low, "m3": p3.m_low, "alpha": alpha, "C_r0": C, "K": K,
                              "M1": M1, "M2": M2, "M": M, "M_tilde": acc.M_tilde,
                              "kick_constant": acc.kick_constant, "tau": tau, "tau_prime_pulse": p1.tau_prime,
                              "tau_prime_accelerator": acc.tau_prime, "measured_speed_after_pulse": measured,
                              "strength": strength}
            ref.certificates = {"sweep": sweep.certificate, "pulse1": p1.certificate, "pulse3": p3.certificate,
                                "accelerator": acc.certificate,
                                "step_one": {"samples": int(x_s.shape[0]), "attempts": attempt + 1}}
            return ref
        C *= 2
    raise SynthesisError("compose", "no C_r0 made the sampled entry argument pass", {"last_C": C})


def unit_perturbations(count: int, seed: int = 0):
    """Zero plus smooth random force fields of sup-norm at most 1."""
    out = [ZeroField()]
    rng = np.random.default_rng(seed)
    for _ in range(count):
        k = rng.integers(-2, 3, size=(2, 2))
        ph = rng.uniform(0, 2 * np.pi, 2)
        om = rng.uniform(-3, 3, 2)

        def fn(t, x, v, k=k, ph=ph, om=om):
            t = np.broadcast_to(np.asarray(t, float), (x.shape[0],))
            a = np.cos(2 * np.pi * (x @ k[0]) + ph[0] + om[0] * t)
            b = np.sin(2 * np.pi * (x @ k[1]) + ph[1] + om[1] * t)
            return np.stack([a, b], 1) / math.sqrt(2)

        from .fields import AnalyticField
        out.append(AnalyticField(fn, sup_norm=1.0))
    return out


def build_magnetic_visits(profile: MagneticProfile, x0, r0: float, tau: float, *, perturbations=None,
                          n_pts: int = 8, n_dirs: int = 64, m_start: float = 1.0, m_cap: float = 2.0 ** 16,
                          log=None):
    """Speed threshold for the magnetic visit contract.

    Every sampled state with |v| in {m, 2m} must enter B(x0, r0/2) during
    (tau/4, 3tau/4) and keep |v|/2 <= |V| <= 2|v| on [0, 3tau/4], for each of
    the supplied unit perturbations.
    """
    perturbations = perturbations if perturbations is not None else unit_perturbations(2)
    magnetic = MagneticField(profile)
    m = float(m_start)
    history = []
    while m <= m_cap:
        x, v = fan_states(n_pts, n_dirs, (m, 2 * m))
        all_ok = True
        for k, pert in enumerate(perturbations):
            visited, band = visit_check(magnetic + pert, x0, r0 / 2, x, v, 0.0, (tau / 4, 3 * tau / 4), 0.0,
                                        r0, speed_band=(0.5, 2.0))
            ok = visited & band
            if not ok.all():
                all_ok = False
                bad = np.flatnonzero(~ok)[0]
                worst = {"x": x[bad].tolist(), "v": v[bad].tolist(), "perturbation": k}
                break
        history.append((m, all_ok))
        if log:
            log(f"magnetic m={m:g} pass={all_ok}")
        if all_ok:
            return m, {"m_low": m, "samples": int(x.shape[0]), "perturbations": len(perturbations),
                       "history": history}
        m *= 2
    raise SynthesisError("magnetic-visits", "speed threshold search exceeded the cap", {"worst": worst})


def compose_reference_magnetic(T: float, profile: MagneticProfile, x0, r0: float, gcc: GccCertificate | None,
                               *, slab: Slab | None = None, n: int = DEFAULT_GRID, n_pts: int = 8,
                               n_dirs: int = 64, seed: int = 0, log=None) -> ReferenceControl:
    """Zero control on the outer thirds and the accelerator on the middle third."""
    if gcc is None or not gcc.passed:
        reason = None if gcc is None else gcc.reason
        raise SynthesisError("gcc", "geometric condition not certified", {"reason": reason})
    x0 = tuple(float(c) for c in x0)
    slab = slab if slab is not None else default_slab(x0, r0)
    tau = T / 3
    perts = unit_perturbations(2, seed)
    m_low, visit_cert = build_magnetic_visits(profile, x0, r0, tau, perturbations=perts, n_pts=n_pts,
                                              n_dirs=n_dirs, log=log)
    b_bar = profile.b_max
    M = max(m_low + T / 3, 100.0, 800 * r0 / T, 32 * r0 * (b_bar + 1))
    sweep = build_sweep(x0, r0, n, slab)
    magnetic = MagneticField(profile)
    acc = build_accelerator(sweep, tau, M, 1.0, H=magnetic, start=T / 3, extra_forces=perts)
    ref = ReferenceControl("magnetic", T, x0, r0, [acc.term], slab, grid=n)
    ref.thresholds = {"m_low": m_low, "M": M, "M_tilde": acc.M_tilde, "kick_constant": acc.kick_constant,
                      "tau": tau, "tau_prime_accelerator": acc.tau_prime, "b_bar": b_bar}
    ref.certificates = {"gcc": gcc.to_dict() if hasattr(gcc, "to_dict") else {}, "visits": visit_cert,
                        "accelerator": acc.certificate, "sweep": sweep.certificate}
    return ref


# ------------------------------------------------------- hyperplane control


@dataclass
class HyperplaneControl:
    slab: Slab
    horizon: float
    mu: float
    theta: np.ndarray
    window: tuple[float, float]
    certificate: dict = field(default_factory=dict)

    @property
    def normal(self) -> np.ndarray:
        return self.slab.normal

    def bump(self) -> BumpProfile:
        return build_bump("Y", self.horizon, self.window)

    def term(self) -> PotentialTerm:
        a, b = self.window
        return PotentialTerm("hyperplane", self.theta, self.slab.normal.copy(), self.mu / (b - a), a, b - a)

    def e_field(self) -> ForceField:
        return field_from_terms([self.term()])

    def grad_phi_field(self) -> ForceField:
        return field_from_terms([self.term()], "grad")

    def correction_field(self) -> ForceField:
        t = self.term()
        return SeparableGridField([GridTerm(t.amplitude, t.mismatch(), t.start, t.end)], amp_sup=[t.amp_sup()])

    def atlas(self) -> BoundaryAtlas:
        return BoundaryAtlas.slab_pair(self.slab)

    def control_region(self) -> Region:
        return Region(slabs=(self.slab.widened(2.0),))


def build_hyperplane_control(slab: Slab, T: float, F: ForceField | None = None, lam: float = 1.0, *,
                             n: int = DEFAULT_GRID, n_x: int = 16, v_cap: float = 8.0, n_radii: int = 8,
                             n_angles: int = 32, mu_cap: float = 2.0 ** 20, log=None) -> HyperplaneControl:
    """Slab potential and the smallest doubled amplitude making every sample meet the slab's class 3.

    The force seen by the samples is F^lam + mu Y(t) n_H with Y supported in (T/3, 2T/3).
    """
    from .fields import ScaledField

    theta = slab_potential(slab, n)
    F = F if F is not None else ZeroField()
    F_lam = ScaledField(F, lam) if lam != 1.0 else F
    window = (T / 3, 2 * T / 3)
    atlas = BoundaryAtlas.slab_pair(slab)
    vel = velocity_disc(v_cap, n_radii, n_angles)
    x = np.repeat(grid_positions(n_x), vel.shape[0], axis=0)
    v = np.tile(vel, (n_x * n_x, 1))
    mu = 1.0
    from .absorption_transport import GAMMA3
    while mu <= mu_cap:
        ctl = HyperplaneControl(slab, T, mu, theta, window)
        force = F_lam + ctl.e_field()
        t_hit = first_class_hits(force, atlas, x, v, 0.0, 5 * T / 6, (T / 6, 5 * T / 6), GAMMA3,
                                 slab.half_width / 5)
        ok = np.isfinite(t_hit)
        if log:
            log(f"hyperplane mu={mu:g} pass={ok.mean():.4f}")
        if ok.all():
            ctl.certificate = {"mu": mu, "samples": int(x.shape[0]), "v_cap": v_cap, "lambda": lam}
            return ctl
        mu *= 2
    raise SynthesisError("hyperplane", "mu search exceeded the cap", {})

"""Characteristic flow X' = V, V' = force(t, X, V) on T^2 x R^2, with surface events.

All integrators are vectorized over particles; positions have shape (P, 2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fields import ForceField
from .torus_geometry import Slab, min_image, torus_dist, wrap_array

SCHEMES = ("rk4", "rotation-splitting")
BISECTION_ITERS = 40


class IntegrationError(RuntimeError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


# ---------------------------------------------------------------- surfaces


@dataclass(frozen=True)
class SphereSurface:
    center: tuple[float, float]
    radius: float
    name: str = "sphere"

    def signed_distance(self, x) -> np.ndarray:
        return torus_dist(np.asarray(x, float), np.asarray(self.center)) - self.radius

    def normal(self, x) -> np.ndarray:
        d = min_image(np.asarray(x, float) - np.asarray(self.center))
        r = np.linalg.norm(d, axis=-1, keepdims=True)
        return d / np.where(r > 0, r, 1.0)


@dataclass(frozen=True)
class SlabSurface:
    """Boundary of a periodic slab: the two line families at +-half_width."""

    slab: Slab
    name: str = "slab"

    def signed_distance(self, x) -> np.ndarray:
        return np.abs(self.slab.signed_offset(x)) - self.slab.half_width

    def normal(self, x) -> np.ndarray:
        s = np.sign(self.slab.signed_offset(x))
        s = np.where(s == 0, 1.0, s)
        return s[..., None] * self.slab.normal


# ------------------------------------------------------------ integrators


def _as_col(h, p):
    h = np.asarray(h, dtype=float)
    return np.broadcast_to(h, (p,))[:, None] if h.ndim == 0 else h[:, None]


def rk4_step(force: ForceField, t, x, v, h):
    p = x.shape[0]
    hc = _as_col(h, p)
    t = np.asarray(t, float)
    hh = hc[:, 0]
    k1x, k1v = v, force(t, x, v)
    k2x, k2v = v + 0.5 * hc * k1v, force(t + 0.5 * hh, x + 0.5 * hc * k1x, v + 0.5 * hc * k1v)
    k3x, k3v = v + 0.5 * hc * k2v, force(t + 0.5 * hh, x + 0.5 * hc * k2x, v + 0.5 * hc * k2v)
    k4x, k4v = v + hc * k3v, force(t + hh, x + hc * k3x, v + hc * k3v)
    xn = x + hc / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
    vn = v + hc / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return xn, vn


def rotate_clockwise(v, angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.stack([c * v[:, 0] + s * v[:, 1], -s * v[:, 0] + c * v[:, 1]], axis=1)


def splitting_step(force: ForceField, t, x, v, h):
    """Strang step: half drift, half kick, exact magnetic rotation, half kick, half drift."""
    mags, rest = force.magnetic_parts()
    p = x.shape[0]
    hc = _as_col(h, p)
    hh = hc[:, 0]
    tm = np.asarray(t, float) + 0.5 * hh
    xm = x + 0.5 * hc * v
    if rest is not None:
        v = v + 0.5 * hc * rest(tm, xm, v)
    if mags:
        rate = np.zeros(p)
        for factor, profile in mags:
            rate += factor * profile.sample(xm)
        v = rotate_clockwise(v, rate * hh)
    if rest is not None:
        v = v + 0.5 * hc * rest(tm, xm, v)
    return xm + 0.5 * hc * v, v


def _stepper(scheme):
    if scheme == "rk4":
        return rk4_step
    if scheme == "rotation-splitting":
        return splitting_step
    raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")


def _check_finite(x, v, t):
    bad = ~(np.all(np.isfinite(x), axis=1) & np.all(np.isfinite(v), axis=1))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise IntegrationError(f"non-finite state for particle {i} near t={np.atleast_1d(t)[0]}",
                               {"index": i, "x": x[i].tolist(), "v": v[i].tolist()})


def advance(x, v, force: ForceField, t0: float, t1: float, dt: float, scheme: str = "rk4"):
    """Fixed-step flow from t0 to t1 (last step shortened); also runs backward if t1 < t0."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    step = _stepper(scheme)
    x = np.atleast_2d(np.asarray(x, dtype=float)).copy()
    v = np.atleast_2d(np.asarray(v, dtype=float)).copy()
    span = t1 - t0
    n = int(math.ceil(abs(span) / dt - 1e-9))
    sign = 1.0 if span >= 0 else -1.0
    t = t0
    for k in range(n):
        h = sign * min(dt, abs(t1 - t))
        x, v = step(force, t, x, v, h)
        x = wrap_array(x)
        t = t0 + sign * min((k + 1) * dt, abs(span))
        _check_finite(x, v, t)
    return x, v


def sample_path(x, v, force, t0, t1, dt, scheme="rk4"):
    """Fixed-step flow returning all intermediate states: times (K,), X (K,P,2), V (K,P,2)."""
    step = _stepper(scheme)
    x = np.atleast_2d(np.asarray(x, dtype=float)).copy()
    v = np.atleast_2d(np.asarray(v, dtype=float)).copy()
    span = t1 - t0
    n = int(math.ceil(abs(span) / dt - 1e-9))
    sign = 1.0 if span >= 0 else -1.0
    ts, xs, vs = [t0], [x.copy()], [v.copy()]
    t = t0
    for k in range(n):
        h = sign * min(dt, abs(t1 - t))
        x, v = step(force, t, x, v, h)
        x = wrap_array(x)
        t = t0 + sign * min((k + 1) * dt, abs(span))
        ts.append(t)
        xs.append(x.copy())
        vs.append(v.copy())
    _check_finite(x, v, t)
    return np.array(ts), np.array(xs), np.array(vs)


# -------------------------------------------------------- event engine


@dataclass
class EventBatch:
    index: np.ndarray
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    normal: np.ndarray
    entering: np.ndarray
    surface: int


def magnetic_bound(force: ForceField) -> float:
    mags, _ = force.magnetic_parts()
    return float(sum(abs(f) * p.b_max for f, p in mags))


def propagate(x, v, force: ForceField, t0, t1: float, *, scheme: str = "rk4",
              dt_max: float = 1e-2, step_length: float = 0.1, surfaces=(),
              on_event=None, on_step=None, alive=None, max_length=None,
              safe_fraction: float = 0.8):
    """Adaptive per-particle flow with surface-crossing detection.

    Each particle advances on its own clock with
    ``dt = min(dt_max, step_length/|v|, 0.1/b_max [rk4 only], field window limits)``.
    With ``max_length`` set, particles far from every surface may stretch their
    step up to ``safe_fraction`` times their surface distance (capped by
    ``max_length``), so a whole chord can never hide inside one step while
    ``step_length`` remains the floor near the surfaces.
    Crossings of every surface are located by bisection on the step fraction.
    ``on_event(batch)`` may return a boolean array marking particles to stop.
    ``on_step(idx, t_new, x_new, v_new)`` observes every accepted step.
    Returns (x, v, t, alive) at the end; stopped particles keep their stop state.
    """
    step = _stepper(scheme)
    x = np.atleast_2d(np.asarray(x, dtype=float)).copy()
    v = np.atleast_2d(np.asarray(v, dtype=float)).copy()
    p = x.shape[0]
    t = np.broadcast_to(np.asarray(t0, dtype=float), (p,)).copy()
    alive = np.ones(p, dtype=bool) if alive is None else np.asarray(alive, dtype=bool).copy()
    bmax = magnetic_bound(force)
    rot_cap = 0.1 / bmax if (scheme == "rk4" and bmax > 0) else math.inf
    tol = 1e-12 * max(1.0, abs(t1))
    while True:
        act = np.flatnonzero(alive & (t < t1 - tol))
        if act.size == 0:
            break
        ta, xa, va = t[act], x[act], v[act]
        speed = np.linalg.norm(va, axis=1)
        g_old = [s.signed_distance(xa) for s in surfaces]
        length = step_length
        if max_length is not None and g_old:
            clear = np.min(np.abs(np.stack(g_old)), axis=0)
            length = np.clip(safe_fraction * clear, step_length, max_length)
        h = np.minimum(dt_max, t1 - ta)
        with np.errstate(over="ignore"):
            h = np.minimum(h, length / np.maximum(speed, 1e-300))
        h = np.minimum(h, rot_cap)
        lim = force.dt_limit(ta)
        h = np.where(np.isfinite(lim) & (lim > 1e-14), np.minimum(h, lim), h)
        h = np.maximum(h, 1e-14)
        xn, vn = step(force, ta, xa, va, h)
        xn = wrap_array(xn)
        _check_finite(xn, vn, ta)
        stop = np.zeros(act.size, dtype=bool)
        for k, surf in enumerate(surfaces):
            g_new = surf.signed_distance(xn)
            enter = (g_old[k] > 0) & (g_new <= 0)
            leave = (g_old[k] < 0) & (g_new >= 0)
            hit = np.flatnonzero(enter | leave)
            if hit.size == 0:
                continue
            te, xe, ve = _locate(step, force, surf, ta[hit], xa[hit], va[hit], h[hit], g_old[k][hit])
            if on_event is not None:
                batch = EventBatch(act[hit], te, xe, ve, surf.normal(xe), enter[hit], k)
                res = on_event(batch)
                if res is not None:
                    stop[hit] |= np.asarray(res, dtype=bool)
        t[act] = ta + h
        x[act] = xn
        v[act] = vn
        if on_step is not None:
            on_step(act, t[act], xn, vn)
        if stop.any():
            alive[act[stop]] = False
    return x, v, t, alive


def _locate(step, force, surf, t, x, v, h, g0):
    """Locate the sign change of the surface distance inside a step.

    Illinois-style regula falsi on the step fraction, keeping a bracket so it
    never does worse than bisection; the returned state sits on the far side.
    """
    lo = np.zeros(t.size)
    hi = np.ones(t.size)
    s0 = np.sign(g0)
    g_lo = np.asarray(g0, dtype=float).copy()
    xe, _ = step(force, t, x, v, h)
    g_hi = surf.signed_distance(wrap_array(xe))
    side = np.zeros(t.size, dtype=np.int8)
    todo = np.ones(t.size, dtype=bool)
    for _ in range(BISECTION_ITERS):
        todo &= (np.abs(g_hi) > 1e-13) & (hi - lo > 1e-15)
        idx = np.flatnonzero(todo)
        if idx.size == 0:
            break
        a, b, ga, gb = lo[idx], hi[idx], g_lo[idx], g_hi[idx]
        denom = gb - ga
        trial = np.where(denom != 0, b - gb * (b - a) / np.where(denom != 0, denom, 1.0), 0.5 * (a + b))
        bad = ~((trial > a) & (trial < b))
        trial[bad] = 0.5 * (a[bad] + b[bad])
        xm, _ = step(force, t[idx], x[idx], v[idx], h[idx] * trial)
        gm = surf.signed_distance(wrap_array(xm))
        same = np.sign(gm) == s0[idx]
        # Illinois: halve the stale endpoint value when the same side repeats
        stale_hi = same & (side[idx] == 1)
        stale_lo = ~same & (side[idx] == -1)
        g_hi[idx[stale_hi]] *= 0.5
        g_lo[idx[stale_lo]] *= 0.5
        lo[idx[same]] = trial[same]
        g_lo[idx[same]] = gm[same]
        hi[idx[~same]] = trial[~same]
        g_hi[idx[~same]] = gm[~same]
        side[idx] = np.where(same, 1, -1)
    xe, ve = step(force, t, x, v, h * hi)
    return t + h * hi, wrap_array(xe), ve


# ---------------------------------------------------------- trajectories


@dataclass
class CrossingEvent:
    t: float
    x: np.ndarray
    v: np.ndarray
    surface: str
    cls: str
    incidence: float
    normal_speed: float


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    dt: float
    events: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        data = np.column_stack([self.t, self.x, self.v])
        np.savetxt(path, data, delimiter=",", header="t,x1,x2,v1,v2", comments="", fmt="%.17g")

    def events_as_records(self) -> list[dict]:
        return [
            {"t": e.t, "x": list(map(float, e.x)), "v": list(map(float, e.v)),
             "surface": e.surface, "class": e.cls, "incidence": e.incidence}
            for e in self.events
        ]


def default_class(x, v, normal) -> str:
    """Ball thresholds; used when a surface carries no classifier of its own."""
    s = float(np.linalg.norm(v))
    vn = float(np.dot(v, normal))
    if vn >= 0:
        return "gamma+"
    if s >= 2.5 and vn <= -s / 4:
        return "gamma4-"
    if s >= 2 and vn <= -s / 5:
        return "gamma3-"
    if s >= 1 and vn <= -s / 8:
        return "gamma2-"
    if s > 0.5 and vn < -s / 10:
        return "gamma-"
    return "none"


def trace(x, v, force: ForceField, t0: float, t1: float, dt: float, surfaces=(),
          scheme: str = "rk4", step_length: float = 0.1) -> Trajectory:
    """Dense samples of one trajectory plus located, classified surface crossings."""
    x = np.asarray(x, dtype=float).reshape(1, 2)
    v = np.asarray(v, dtype=float).reshape(1, 2)
    ts, xs, vs = [float(t0)], [x[0].copy()], [v[0].copy()]
    events: list[CrossingEvent] = []

    def on_step(idx, tn, xn, vn):
        ts.append(float(tn[0]))
        xs.append(xn[0].copy())
        vs.append(vn[0].copy())

    def on_event(batch):
        surf = surfaces[batch.surface]
        nrm = batch.normal[0]
        ve = batch.v[0]
        cls_fn = getattr(surf, "classify_name", None)
        cls = cls_fn(batch.x[0], ve) if cls_fn else default_class(batch.x[0], ve, nrm)
        sp = float(np.linalg.norm(ve))
        vn = float(np.dot(ve, nrm))
        events.append(CrossingEvent(float(batch.t[0]), batch.x[0].copy(), ve.copy(),
                                    getattr(surf, "name", "surface"), cls,
                                    vn / sp if sp > 0 else 0.0, vn))
        return None

    geo = [getattr(s, "surface", s) for s in surfaces]
    propagate(x, v, force, t0, t1, scheme=scheme, dt_max=dt, step_length=step_length,
              surfaces=geo, on_event=on_event, on_step=on_step)
    events.sort(key=lambda e: e.t)
    return Trajectory(np.array(ts), np.array(xs), np.array(vs), dt, events)


# ----------------------------------------------------------- diagnostics


def clockwise_angle_increments(v: np.ndarray) -> np.ndarray:
    """Signed clockwise rotation between consecutive velocity samples (accumulable)."""
    a, b = v[:-1], v[1:]
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    dot = np.sum(a * b, axis=1)
    return -np.arctan2(cross, dot)


def angle_diagnostic(traj: Trajectory, b) -> tuple[float, int]:
    """max |dtheta/dt - b(X)| at step midpoints; returns (defect, skipped samples).

    theta is the clockwise angle of V, accumulated from increments.
    """
    v = traj.v
    speed = np.linalg.norm(v, axis=1)
    ok = (speed[:-1] > 1e-9) & (speed[1:] > 1e-9)
    dth = clockwise_angle_increments(v)
    dt = np.diff(traj.t)
    xm = wrap_array(traj.x[:-1] + 0.5 * min_image(traj.x[1:] - traj.x[:-1]))
    rate = dth / dt
    bm = b.sample(xm) if hasattr(b, "sample") else np.asarray(b(xm))
    defect = np.abs(rate - bm)[ok & (dt > 0)]
    return (float(defect.max()) if defect.size else 0.0), int((~ok).sum())


def speed_diagnostic(traj: Trajectory, extra_force, scheme_force=None) -> tuple[float, int]:
    """max |d|V|/dt - F.V/|V|| at step midpoints; returns (defect, skipped samples)."""
    v = traj.v
    speed = np.linalg.norm(v, axis=1)
    ok = (speed[:-1] > 1e-9) & (speed[1:] > 1e-9)
    dt = np.diff(traj.t)
    xm = wrap_array(traj.x[:-1] + 0.5 * min_image(traj.x[1:] - traj.x[:-1]))
    vm = 0.5 * (v[:-1] + v[1:])
    tm = 0.5 * (traj.t[:-1] + traj.t[1:])
    fm = extra_force(tm, xm, vm)
    law = np.sum(fm * vm, axis=1) / np.maximum(np.linalg.norm(vm, axis=1), 1e-300)
    rate = np.diff(speed) / dt
    defect = np.abs(rate - law)[ok & (dt > 0)]
    return (float(defect.max()) if defect.size else 0.0), int((~ok).sum())


def compare_trajectories(x, v, force_a, force_b, t0, t1, dt, scheme="rk4"):
    """Sup over shared times of the position (torus) and velocity gaps of two flows."""
    _, xa, va = sample_path(x, v, force_a, t0, t1, dt, scheme)
    _, xb, vb = sample_path(x, v, force_b, t0, t1, dt, scheme)
    dx = torus_dist(xa, xb)
    dv = np.linalg.norm(va - vb, axis=-1)
    return float(dx.max()), float(dv.max())


def verify_scaling(x, v, force: ForceField, lam: float, horizon: float, dt: float,
                   scheme: str = "rk4", refine: int = 1) -> float:
    """Sup over the run of |X^lam(t/lam) - X(t)| + |V^lam(t/lam) - lam V(t)|.

    The scaled run uses force^lam on [0, T/lam] with step dt/(|lam| refine), and
    every refine-th sample is compared. With refine = 1 and a power-of-two lam
    the two runs are bit-identical rescalings of each other; refine > 1 makes
    the comparison test the continuous identity up to integration error.
    """
    from .fields import ScaledField

    if lam == 0:
        raise ValueError("scaling parameter must be nonzero")
    n = int(math.ceil(horizon / dt - 1e-9))
    dt = horizon / n
    _, xo, vo = sample_path(x, v, force, 0.0, horizon, dt, scheme)
    v_s = lam * np.atleast_2d(np.asarray(v, dtype=float))
    _, xs, vs = sample_path(x, v_s, ScaledField(force, lam), 0.0, horizon / lam, dt / abs(lam) / refine, scheme)
    xs, vs = xs[::refine], vs[::refine]
    m = min(xo.shape[0], xs.shape[0])
    gap = torus_dist(xs[:m], xo[:m]) + np.linalg.norm(vs[:m] - lam * vo[:m], axis=-1)
    return float(gap.max())


def reversal_round_trip(x, v, force: ForceField, horizon: float, dt: float, scheme="rk4") -> float:
    """Run forward to T, flip velocity, run the reversed field; distance back to (x, -v)."""
    from .fields import ReversedField

    xT, vT = advance(x, v, force, 0.0, horizon, dt, scheme)
    xb, vb = advance(xT, -vT, ReversedField(force, horizon), 0.0, horizon, dt, scheme)
    x0 = np.atleast_2d(np.asarray(x, dtype=float))
    v0 = np.atleast_2d(np.asarray(v, dtype=float))
    return float(np.max(torus_dist(xb, x0) + np.linalg.norm(vb + v0, axis=-1)))


def unwrapped_positions(x: np.ndarray) -> np.ndarray:
    """Undo torus wrapping along a time series of shape (K, ..., 2)."""
    steps = min_image(np.diff(x, axis=0))
    return np.concatenate([x[:1], x[:1] + np.cumsum(steps, axis=0)], axis=0)

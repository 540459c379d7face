"""Boundary classes, opacity and absorbing transport of weighted particle ensembles."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .characteristics import SlabSurface, SphereSurface, propagate
from .fields import ForceField, scale_particles
from .torus_geometry import Ball, Region, Slab

NONE, GAMMA_MINUS, GAMMA2, GAMMA3, GAMMA4, GAMMA_PLUS = 0, 1, 2, 3, 4, 5
CLASS_NAMES = {NONE: "none", GAMMA_MINUS: "gamma-", GAMMA2: "gamma2-", GAMMA3: "gamma3-",
               GAMMA4: "gamma4-", GAMMA_PLUS: "gamma+"}

BALL_THRESHOLDS = {
    # (speed floor, incidence ceiling as a fraction of |v|); the first level is strict
    "gamma-": (0.5, 1 / 10),
    "gamma2-": (1.0, 1 / 8),
    "gamma3-": (2.0, 1 / 5),
    "gamma4-": (2.5, 1 / 4),
}
SLAB_THRESHOLDS = {
    # (speed floor, ceiling on v.nu itself)
    "gamma-": (0.0, 1.0),
    "gamma2-": (1.0, 1.5),
    "gamma3-": (2.0, 2.0),
}


def smoothstep(s):
    """C-infinity transition: 0 for s <= 0, 1 for s >= 1."""
    s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)
        b = np.where(s < 1, np.exp(-1.0 / np.where(s < 1, 1.0 - s, 1.0)), 0.0)
    return a / (a + b)


@dataclass(frozen=True)
class BoundaryAtlas:
    kind: str  # "sphere" or "slab"
    ball: Ball | None = None
    slab: Slab | None = None
    thresholds: dict = field(default_factory=dict)
    locator_tol: float = 1e-6

    @classmethod
    def sphere(cls, center, radius, thresholds=None) -> "BoundaryAtlas":
        return cls("sphere", ball=Ball(tuple(center), float(radius)),
                   thresholds=dict(thresholds or BALL_THRESHOLDS))

    @classmethod
    def slab_pair(cls, slab: Slab, thresholds=None) -> "BoundaryAtlas":
        return cls("slab", slab=slab, thresholds=dict(thresholds or SLAB_THRESHOLDS))

    @property
    def surface(self):
        if self.kind == "sphere":
            return SphereSurface(self.ball.center, self.ball.radius, "sphere")
        return SlabSurface(self.slab, "slab")

    @property
    def name(self) -> str:
        return self.kind

    def normal(self, x):
        return self.surface.normal(x)

    def coordinates(self, x, v):
        """(speed, v . nu) for boundary states."""
        v = np.atleast_2d(np.asarray(v, dtype=float))
        nrm = np.atleast_2d(self.surface.normal(np.atleast_2d(x)))
        return np.linalg.norm(v, axis=1), np.sum(v * nrm, axis=1)

    def classify(self, x, v, check: bool = True) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if check:
            off = np.abs(self.surface.signed_distance(x))
            if np.any(off > self.locator_tol):
                raise ValueError(f"state is {off.max():.3g} away from the surface")
        s, vn = self.coordinates(x, v)
        out = np.full(s.shape, NONE, dtype=int)
        th = self.thresholds
        if self.kind == "sphere":
            s1, a1 = th["gamma-"]
            out[(s > s1) & (vn < -a1 * s)] = GAMMA_MINUS
            for code, key in ((GAMMA2, "gamma2-"), (GAMMA3, "gamma3-"), (GAMMA4, "gamma4-")):
                sk, ak = th[key]
                out[(s >= sk) & (vn <= -ak * s)] = code
        else:
            _, c1 = th["gamma-"]
            out[vn < -c1] = GAMMA_MINUS
            for code, key in ((GAMMA2, "gamma2-"), (GAMMA3, "gamma3-")):
                sk, ck = th[key]
                out[(s >= sk) & (vn <= -ck)] = code
        out[vn >= 0] = GAMMA_PLUS
        return out

    def classify_name(self, x, v) -> str:
        return CLASS_NAMES[int(self.classify(x, v, check=False)[0])]


@dataclass(frozen=True)
class OpacityFn:
    """Smooth U in (speed, incidence) coordinates.

    Sphere: 1 off gamma2-, 0 on gamma3-, product blend of two smoothsteps.
    Slab: 1 off gamma-, 0 on gamma2-, smoothstep in v.nu.
    """

    atlas: BoundaryAtlas

    def __call__(self, x, v) -> np.ndarray:
        s, vn = self.atlas.coordinates(x, v)
        th = self.atlas.thresholds
        if self.atlas.kind == "sphere":
            s2, a2 = th["gamma2-"]
            s3, a3 = th["gamma3-"]
            a = vn / np.maximum(s, 1e-300)
            ramp_s = smoothstep((s - s2) / (s3 - s2))
            ramp_a = smoothstep((-a - a2) / (a3 - a2))
            return 1.0 - ramp_s * ramp_a
        _, c1 = th["gamma-"]
        _, c2 = th["gamma2-"]
        return 1.0 - smoothstep((-vn - c1) / (c2 - c1))


def opacity(atlas: BoundaryAtlas, U: OpacityFn, t, x, v, window) -> np.ndarray:
    """(1 - window(t)) + window(t) * U(x, v)."""
    w = np.asarray(window(np.asarray(t, dtype=float)), dtype=float)
    return (1.0 - w) + w * U(x, v)


# ------------------------------------------------------------- ensembles


@dataclass
class WeightedEnsemble:
    x: np.ndarray
    v: np.ndarray
    weight: np.ndarray
    measure: np.ndarray
    crossings: np.ndarray | None = None
    ids: np.ndarray | None = None
    t: float = 0.0
    speed0: np.ndarray | None = None
    culled_mass: float = 0.0

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.v = np.atleast_2d(np.asarray(self.v, dtype=float))
        p = self.x.shape[0]
        self.weight = np.asarray(self.weight, dtype=float).reshape(p)
        self.measure = np.broadcast_to(np.asarray(self.measure, dtype=float), (p,)).copy()
        if self.crossings is None:
            self.crossings = np.zeros(p, dtype=int)
        if self.ids is None:
            self.ids = np.arange(p)
        if self.speed0 is None:
            self.speed0 = np.linalg.norm(self.v, axis=1)
        if not np.all(np.isfinite(self.weight)):
            raise ValueError("weights must be finite")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def mass_per_particle(self) -> np.ndarray:
        return self.weight * self.measure

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.weight * self.measure))

    def copy(self) -> "WeightedEnsemble":
        return replace(self, x=self.x.copy(), v=self.v.copy(), weight=self.weight.copy(),
                       measure=self.measure.copy(), crossings=self.crossings.copy(),
                       ids=self.ids.copy(), speed0=self.speed0.copy())

    def subset(self, mask) -> "WeightedEnsemble":
        return replace(self, x=self.x[mask], v=self.v[mask], weight=self.weight[mask],
                       measure=self.measure[mask], crossings=self.crossings[mask],
                       ids=self.ids[mask], speed0=self.speed0[mask])

    def scaled(self, lam: float) -> "WeightedEnsemble":
        x, v, w, m = scale_particles(self.x, self.v, self.weight, self.measure, lam)
        return replace(self, x=x, v=v, weight=w, measure=m, crossings=self.crossings.copy(),
                       ids=self.ids.copy(), speed0=np.linalg.norm(v, axis=1), t=self.t / lam)

    def to_csv(self, path) -> None:
        data = np.column_stack([self.ids, self.x, self.v, self.weight, self.crossings])
        np.savetxt(path, data, delimiter=",", header="id,x1,x2,v1,v2,weight,crossings",
                   comments="", fmt=["%d", "%.17g", "%.17g", "%.17g", "%.17g", "%.17g", "%d"])


def lattice_ensemble(density, n_x: int, n_v: int, v_max: float, *, x_offset=0.5,
                     weight_floor: float = 0.0) -> WeightedEnsemble:
    """Deterministic tensor-product particles carrying values of density(x, v).

    Positions are cell centers of an n_x^2 grid over T^2, velocities cell centers
    of an n_v^2 grid over [-v_max, v_max]^2; the measure is the cell volume.
    """
    sx = (np.arange(n_x) + x_offset) / n_x
    sv = -v_max + (np.arange(n_v) + 0.5) * (2 * v_max / n_v)
    X1, X2, V1, V2 = np.meshgrid(sx, sx, sv, sv, indexing="ij")
    x = np.stack([X1.ravel(), X2.ravel()], 1)
    v = np.stack([V1.ravel(), V2.ravel()], 1)
    w = np.asarray(density(x, v), dtype=float)
    keep = w > weight_floor
    cell = (1.0 / n_x) ** 2 * (2 * v_max / n_v) ** 2
    return WeightedEnsemble(x[keep], v[keep], w[keep], np.full(int(keep.sum()), cell))


@dataclass
class AbsorptionLog:
    """Crossing events that changed weights: where and how much mass left."""

    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    v: list = field(default_factory=list)
    mass: list = field(default_factory=list)
    ids: list = field(default_factory=list)

    def arrays(self):
        if not self.t:
            return np.zeros(0), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros(0, int)
        return (np.concatenate(self.t), np.concatenate(self.x), np.concatenate(self.v),
                np.concatenate(self.mass), np.concatenate(self.ids))


CULL_THRESHOLD = 1e-14


def transport_absorb(ens: WeightedEnsemble, force: ForceField, t0: float, t1: float,
                     atlas: BoundaryAtlas, U: OpacityFn, window, *, dt: float = 1e-2,
                     step_length: float = 0.1, scheme: str = "rk4", log: AbsorptionLog | None = None,
                     on_step=None, cull: bool = True, max_length: float | None = None) -> WeightedEnsemble:
    """Advance every particle; at each inward gamma- crossing multiply its weight by the opacity."""
    out = ens.copy()
    p = len(out)
    if p == 0:
        out.t = t1
        return out
    weight = out.weight
    crossings = out.crossings
    culled = 0.0

    def on_event(batch):
        nonlocal culled
        ent = batch.entering
        if not ent.any():
            return None
        idx = batch.index[ent]
        cls = atlas.classify(batch.x[ent], batch.v[ent], check=False)
        inward = (cls != NONE) & (cls != GAMMA_PLUS)
        if not inward.any():
            return None
        idx = idx[inward]
        fac = opacity(atlas, U, batch.t[ent][inward], batch.x[ent][inward], batch.v[ent][inward], window)
        before = weight[idx].copy()
        weight[idx] = before * fac
        crossings[idx] += 1
        if log is not None:
            lost = (before - weight[idx]) * out.measure[idx]
            nz = lost != 0
            if nz.any():
                log.t.append(batch.t[ent][inward][nz])
                log.x.append(batch.x[ent][inward][nz])
                log.v.append(batch.v[ent][inward][nz])
                log.mass.append(lost[nz])
                log.ids.append(out.ids[idx[nz]])
        if cull:
            stop = np.zeros(batch.index.size, dtype=bool)
            dead = weight[idx] < CULL_THRESHOLD
            if dead.any():
                pos = np.flatnonzero(ent)[np.flatnonzero(inward)]
                stop[pos[dead]] = True
                culled += float(np.sum(weight[idx[dead]] * out.measure[idx[dead]]))
            return stop
        return None

    x, v, t, alive = propagate(out.x, out.v, force, t0, t1, scheme=scheme, dt_max=dt,
                               step_length=step_length, surfaces=[atlas.surface],
                               on_event=on_event, on_step=on_step, max_length=max_length)
    out.x, out.v = x, v
    out.t = t1
    out.culled_mass = ens.culled_mass + culled
    if cull and not alive.all():
        out = out.subset(alive)
    return out


def verify_crossing_bound(ens: WeightedEnsemble, c_probe: float) -> tuple[float, bool]:
    if len(ens) == 0:
        return 0.0, True
    ratio = ens.crossings / (1.0 + ens.speed0)
    worst = float(ratio.max())
    return worst, worst <= c_probe


def residual_mass_outside(ens: WeightedEnsemble, omega: Region) -> float:
    if len(ens) == 0:
        return 0.0
    out = ~omega.contains(ens.x)
    return float(np.sum(ens.weight[out] * ens.measure[out]))


def min_gamma_separation(atlas: BoundaryAtlas) -> float:
    """Distance in velocity space between the complement of gamma2- and gamma3- at unit normal.

    For the sphere the sets are cones cut by speed floors, so the distance is the
    smaller of the speed gap and the angular gap measured at the gamma3- speed floor.
    """
    th = atlas.thresholds
    if atlas.kind == "sphere":
        s2, a2 = th["gamma2-"]
        s3, a3 = th["gamma3-"]
        ang = math.asin(a3) - math.asin(a2)
        return min(s3 - s2, s3 * math.sin(ang))
    _, c1 = th["gamma-"]
    _, c2 = th["gamma2-"]
    return c2 - c1

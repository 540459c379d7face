"""Periodic geometry on the unit torus [0,1)^2.

Grids used throughout the package are node based: entry ``[i, j]`` of an
``N x N`` array sits at the point ``(i/N, j/N)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

TORUS_DIAMETER = math.sqrt(0.5)


@dataclass(frozen=True)
class TorusPoint:
    x1: float
    x2: float

    def __post_init__(self):
        w = wrap_array(np.array([self.x1, self.x2], dtype=float))
        object.__setattr__(self, "x1", float(w[0]))
        object.__setattr__(self, "x2", float(w[1]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2])


def wrap_array(x):
    """Reduce coordinates into [0, 1); works on any array shape."""
    x = np.asarray(x, dtype=float)
    w = np.mod(x, 1.0)
    # np.mod can return exactly 1.0 for tiny negative inputs
    return np.where(w >= 1.0, 0.0, w)


def wrap(raw) -> TorusPoint:
    a = np.asarray(raw, dtype=float)
    if a.shape != (2,) or not np.all(np.isfinite(a)):
        raise ValueError(f"wrap expects two finite coordinates, got {raw!r}")
    w = wrap_array(a)
    return TorusPoint(w[0], w[1])


def min_image(delta):
    """Shortest periodic representative of a displacement."""
    delta = np.asarray(delta, dtype=float)
    return delta - np.round(delta)


def torus_dist(a, b) -> float | np.ndarray:
    """Distance on the torus: Euclidean norm of the minimal-image displacement.

    Accepts TorusPoint instances or arrays with trailing dimension 2.
    """
    pa = a.as_array() if isinstance(a, TorusPoint) else np.asarray(a, dtype=float)
    pb = b.as_array() if isinstance(b, TorusPoint) else np.asarray(b, dtype=float)
    d = np.linalg.norm(min_image(pa - pb), axis=-1)
    return float(d) if np.ndim(d) == 0 else d


def grid_coords(n: int) -> tuple[np.ndarray, np.ndarray]:
    s = np.arange(n) / n
    return np.meshgrid(s, s, indexing="ij")


def grid_points(n: int) -> np.ndarray:
    g1, g2 = grid_coords(n)
    return np.stack([g1.ravel(), g2.ravel()], axis=1)


# ---------------------------------------------------------------- regions


@dataclass(frozen=True)
class Ball:
    center: tuple[float, float]
    radius: float

    def contains(self, x) -> np.ndarray:
        return torus_dist(np.asarray(x, float), np.asarray(self.center)) <= self.radius


@dataclass(frozen=True)
class Slab:
    """Closed periodic slab {x : |signed distance to H| <= half_width}.

    H is the closed line family {x . (p, q) = offset mod 1}; the unit normal is
    (p, q)/|(p, q)| and consecutive lifted lines are 1/|(p, q)| apart.
    """

    direction: tuple[int, int]
    offset: float
    half_width: float

    def __post_init__(self):
        p, q = self.direction
        if int(p) != p or int(q) != q or (p == 0 and q == 0):
            raise ValueError("slab normal must be a nonzero integer vector (closed lifted lines)")
        if math.gcd(int(p), int(q)) != 1:
            raise ValueError("slab normal integers must be coprime")

    @property
    def normal(self) -> np.ndarray:
        v = np.array(self.direction, dtype=float)
        return v / np.linalg.norm(v)

    @property
    def spacing(self) -> float:
        return 1.0 / float(np.linalg.norm(self.direction))

    def signed_offset(self, x) -> np.ndarray:
        """Signed distance from x to the nearest lifted line, along the normal."""
        x = np.asarray(x, dtype=float)
        s = x @ np.array(self.direction, dtype=float) - self.offset
        return min_image(s) * self.spacing

    def contains(self, x) -> np.ndarray:
        return np.abs(self.signed_offset(x)) <= self.half_width

    def widened(self, factor: float) -> "Slab":
        return Slab(self.direction, self.offset, self.half_width * factor)


@dataclass(frozen=True)
class Region:
    """Finite union of balls and slabs; used for the control zone and source supports."""

    balls: tuple = ()
    slabs: tuple = ()

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1], dtype=bool)
        for b in self.balls:
            out |= b.contains(x)
        for s in self.slabs:
            out |= s.contains(x)
        return out

    def grid_mask(self, n: int) -> np.ndarray:
        return self.contains(grid_points(n)).reshape(n, n)

    def area(self, n: int = 512) -> float:
        return float(self.grid_mask(n).mean())

    def union(self, other: "Region") -> "Region":
        return Region(self.balls + other.balls, self.slabs + other.slabs)

    def to_dict(self) -> dict:
        return {
            "balls": [{"center": list(b.center), "radius": b.radius} for b in self.balls],
            "slabs": [
                {"direction": list(s.direction), "offset": s.offset, "half_width": s.half_width}
                for s in self.slabs
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Region":
        balls = tuple(Ball(tuple(b["center"]), float(b["radius"])) for b in d.get("balls", []))
        slabs = tuple(
            Slab(tuple(int(c) for c in s["direction"]), float(s["offset"]), float(s["half_width"]))
            for s in d.get("slabs", [])
        )
        return cls(balls, slabs)


# ----------------------------------------------------------- compact sets


@dataclass
class CompactSet:
    indicator: np.ndarray
    provenance: str = "explicit-ball-list"
    _dist: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def resolution(self) -> int:
        return self.indicator.shape[0]

    def is_empty(self) -> bool:
        return not bool(self.indicator.any())

    def distance(self) -> np.ndarray:
        """Periodic Euclidean distance from every node to the set (torus units)."""
        if self._dist is None:
            self._dist = periodic_distance_transform(self.indicator)
        return self._dist

    def lookup(self, x) -> np.ndarray:
        """Nearest-node membership test for arbitrary points."""
        n = self.resolution
        idx = np.floor(wrap_array(x) * n + 0.5).astype(int) % n
        return self.indicator[idx[..., 0], idx[..., 1]]

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "provenance": self.provenance,
            "indicator_rle": rle_encode(self.indicator),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CompactSet":
        n = int(d["resolution"])
        return cls(rle_decode(d["indicator_rle"], n), d.get("provenance", "explicit-ball-list"))


def periodic_distance_transform(mask: np.ndarray) -> np.ndarray:
    n = mask.shape[0]
    if not mask.any():
        return np.full(mask.shape, np.inf)
    tiled = np.tile(~mask, (3, 3))
    dist = ndimage.distance_transform_edt(tiled)
    return dist[n : 2 * n, n : 2 * n] / n


def rle_encode(mask: np.ndarray) -> list[int]:
    """Run lengths of the row-major flattened mask, starting with a False run."""
    flat = mask.ravel().astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: list[int], n: int) -> np.ndarray:
    vals = np.zeros(len(runs), dtype=bool)
    vals[1::2] = True
    flat = np.repeat(vals, runs)
    return flat.reshape(n, n)


def full_torus(n: int = 512) -> CompactSet:
    return CompactSet(np.ones((n, n), dtype=bool), "explicit-ball-list")


def ball_set(center, radius: float, n: int = 512) -> CompactSet:
    pts = grid_points(n)
    return CompactSet(torus_dist(pts, np.asarray(center)).reshape(n, n) <= radius, "explicit-ball-list")


def balls_set(balls, n: int = 512) -> CompactSet:
    pts = grid_points(n)
    ind = np.zeros(n * n, dtype=bool)
    for c, r in balls:
        ind |= torus_dist(pts, np.asarray(c)) <= r
    return CompactSet(ind.reshape(n, n), "explicit-ball-list")


def axes_cross(n: int = 512) -> CompactSet:
    ind = np.zeros((n, n), dtype=bool)
    ind[0, :] = True
    ind[:, 0] = True
    return CompactSet(ind, "explicit-ball-list")


def complement_of_ball(center, radius: float, n: int = 512) -> CompactSet:
    pts = grid_points(n)
    return CompactSet(torus_dist(pts, np.asarray(center)).reshape(n, n) >= radius, "explicit-ball-list")


def threshold_set(b_grid: np.ndarray, level: float = 0.0) -> CompactSet:
    return CompactSet(np.asarray(b_grid) > level, "grid-threshold-of-b")


def thicken(K: CompactSet, r: float) -> CompactSet:
    if r < 0:
        raise ValueError("thickening radius must be nonnegative")
    if r >= TORUS_DIAMETER and not K.is_empty():
        return CompactSet(np.ones_like(K.indicator), K.provenance)
    # small slack absorbs round-off in the transform
    return CompactSet(K.distance() <= r + 1e-12, K.provenance)


# ----------------------------------------------------------- ray marching


def ray_hits(x, e, K: CompactSet, s_max: float, ds: float | None = None) -> np.ndarray:
    """Boolean samples of membership along many rays.

    ``x`` and ``e`` have shape (R, 2); the result has shape (R, S) for the
    sample parameters ``s = k*ds``, k = 0..S-1.
    """
    if ds is None:
        ds = 0.5 / K.resolution
    s = np.arange(0.0, s_max + 0.5 * ds, ds)
    pts = np.asarray(x)[:, None, :] + s[None, :, None] * np.asarray(e)[:, None, :]
    return K.lookup(pts), s


def ray_enters_set(x, e, K: CompactSet, s_max: float, ds: float | None = None) -> float | None:
    """Smallest sampled parameter s in [0, s_max] with x + s e in K, else None."""
    e = np.asarray(e, dtype=float)
    if abs(np.linalg.norm(e) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    if ds is None:
        ds = 0.5 / K.resolution
    if ds <= 0:
        raise ValueError("ds must be positive")
    x = np.asarray(x.as_array() if isinstance(x, TorusPoint) else x, dtype=float)
    chunk = 4096
    s0 = 0.0
    while s0 <= s_max:
        s = s0 + ds * np.arange(chunk)
        s = s[s <= s_max + 1e-15]
        if s.size == 0:
            break
        hit = K.lookup(x[None, :] + s[:, None] * e[None, :])
        k = np.flatnonzero(hit)
        if k.size:
            return float(s[k[0]])
        s0 = s[-1] + ds
    return None


def _first_dwell(x, e, Kd: CompactSet, dwell: float, s_max: float, ds: float) -> np.ndarray:
    """For each ray, the first s where the ray stays in Kd over [s, s + dwell].

    Returns NaN where no such s exists below s_max.
    """
    n_rays = x.shape[0]
    need = int(math.ceil(dwell / ds)) + 1
    out = np.full(n_rays, np.nan)
    n_start = int(math.floor(s_max / ds)) + 1
    block = 1024
    k0 = 0
    while k0 < n_start:
        idx = np.flatnonzero(np.isnan(out))
        if idx.size == 0:
            break
        # samples k0 .. k0+block+need-2 so every start in the block sees a full window
        ks = np.arange(k0, min(k0 + block, n_start) + need - 1)
        pts = x[idx, None, :] + (ks * ds)[None, :, None] * e[idx, None, :]
        inside = Kd.lookup(pts).astype(np.int32)
        c = np.concatenate([np.zeros((idx.size, 1), np.int32), np.cumsum(inside, axis=1)], axis=1)
        win = c[:, need:] - c[:, :-need]
        full = win == need
        has = full.any(axis=1)
        first = np.argmax(full, axis=1)
        out[idx[has]] = (k0 + first[has]) * ds
        k0 += block
    out[out > s_max + 1e-12] = np.nan
    return out


@dataclass
class GccCertificate:
    b_floor: float
    d: float
    D: float
    n_dirs: int
    n_pts: int
    passed: bool
    resolution: int = 0
    reason: str = ""
    K: CompactSet | None = field(default=None, repr=False)

    @property
    def pass_(self) -> bool:
        return self.passed

    def to_dict(self) -> dict:
        out = {
            "resolution": self.resolution,
            "b_floor": self.b_floor,
            "d": self.d,
            "D": self.D,
            "n_dirs": self.n_dirs,
            "n_pts": self.n_pts,
            "pass": self.passed,
            "reason": self.reason,
        }
        if self.K is not None:
            out["indicator_rle"] = rle_encode(self.K.indicator)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "GccCertificate":
        K = None
        if "indicator_rle" in d:
            K = CompactSet(rle_decode(d["indicator_rle"], int(d["resolution"])))
        return cls(
            float(d["b_floor"]), float(d["d"]), float(d["D"]), int(d["n_dirs"]),
            int(d["n_pts"]), bool(d["pass"]), int(d["resolution"]), d.get("reason", ""), K,
        )


def _sample_rays(n_dirs: int, n_pts: int, rng=None):
    m = max(1, int(math.ceil(math.sqrt(n_pts))))
    if rng is None:
        s = (np.arange(m) + 0.5) / m
        g1, g2 = np.meshgrid(s, s, indexing="ij")
        pts = np.stack([g1.ravel(), g2.ravel()], 1)
        ang = 2 * np.pi * (np.arange(n_dirs) + 0.5) / n_dirs
    else:
        pts = rng.random((n_pts, 2))
        ang = 2 * np.pi * rng.random(n_dirs)
    dirs = np.stack([np.cos(ang), np.sin(ang)], 1)
    return pts, dirs


def certify_gcc(b, K: CompactSet, n_dirs: int = 64, n_pts: int = 256,
                s_max: float = 8.0, d_init: float | None = None,
                max_halvings: int = 12) -> GccCertificate:
    """Sampled certificate that rays from every point meet K, with b bounded below near K.

    ``b`` is a MagneticProfile (anything with ``grid`` and ``sample``).
    """
    if K.is_empty():
        raise ValueError("compact set K is empty")
    if n_dirs < 16 or n_pts < 16:
        raise ValueError("sample counts must be at least 16")
    n = K.resolution
    bgrid = _grid_on(b, n)
    if bgrid[K.indicator].min() <= 0.0:
        return GccCertificate(float(bgrid[K.indicator].min()), 0.0, math.inf, n_dirs, n_pts,
                              False, n, "b is not positive on K", K)

    d = TORUS_DIAMETER / 8 if d_init is None else d_init
    b_floor = -math.inf
    for _ in range(max_halvings + 1):
        K2d = thicken(K, 2 * d)
        b_floor = float(bgrid[K2d.indicator].min())
        if b_floor > 0:
            break
        d *= 0.5
    else:
        return GccCertificate(b_floor, d, math.inf, n_dirs, n_pts, False, n,
                              "no thickening radius keeps b positive", K)

    Kd = thicken(K, d)
    pts, dirs = _sample_rays(n_dirs, n_pts)
    D = _max_entry(pts, dirs, Kd, d, s_max, n)
    n_rays = pts.shape[0] * dirs.shape[0]
    if not np.isfinite(D):
        return GccCertificate(b_floor, d, math.inf, n_dirs, pts.shape[0], False, n,
                              f"a ray exhausted s_max={s_max} without dwelling in K_d", K)
    return GccCertificate(b_floor, d, D, n_dirs, pts.shape[0], True, n,
                          f"{n_rays} rays sampled", K)


def _grid_on(b, n: int) -> np.ndarray:
    g = np.asarray(b.grid)
    if g.shape[0] == n:
        return g
    return np.asarray(b.sample(grid_points(n))).reshape(n, n)


def _max_entry(pts, dirs, Kd, d, s_max, n) -> float:
    x = np.repeat(pts, dirs.shape[0], axis=0)
    e = np.tile(dirs, (pts.shape[0], 1))
    ds = 0.5 / n
    worst = 0.0
    for lo in range(0, x.shape[0], 4096):
        t = _first_dwell(x[lo:lo + 4096], e[lo:lo + 4096], Kd, d / 2, s_max, ds)
        if np.isnan(t).any():
            return math.inf
        worst = max(worst, float(t.max()))
    return worst


def recheck_certificate(cert: GccCertificate, n_rays: int = 100, seed: int = 0,
                        margin: float = 1.1) -> tuple[bool, float]:
    """Fresh random rays must dwell in K_d within margin*D; returns (ok, worst entry)."""
    if cert.K is None:
        raise ValueError("certificate carries no compact set")
    rng = np.random.default_rng(seed)
    x = rng.random((n_rays, 2))
    ang = 2 * np.pi * rng.random(n_rays)
    e = np.stack([np.cos(ang), np.sin(ang)], 1)
    Kd = thicken(cert.K, cert.d)
    limit = margin * cert.D + 0.5 / cert.resolution
    t = _first_dwell(x, e, Kd, cert.d / 2, limit, 0.5 / cert.resolution)
    worst = float(np.nanmax(t)) if np.isfinite(t).any() else math.inf
    return bool(np.all(np.isfinite(t))), worst

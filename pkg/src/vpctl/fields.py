"""Force fields on T^2 x R^2: bounded, magnetic, grid-based, sums, scalings and reversals.

Every field is called as ``field(t, x, v)`` with ``x, v`` of shape (P, 2) and
``t`` either a scalar or a per-particle array of shape (P,); it returns (P, 2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .poisson_spectral import gradient, sample_field
from .torus_geometry import grid_points


def perp(v: np.ndarray) -> np.ndarray:
    """v -> (v2, -v1)."""
    v = np.asarray(v, dtype=float)
    return np.stack([v[..., 1], -v[..., 0]], axis=-1)


def _col(t, n):
    t = np.asarray(t, dtype=float)
    return np.broadcast_to(t, (n,)) if t.ndim == 0 else t


class ForceField:
    sup_norm: float = math.inf
    lipschitz: float = math.inf

    def __call__(self, t, x, v) -> np.ndarray:
        raise NotImplementedError

    def windows(self) -> list[tuple[float, float, float]]:
        """Active time windows as (start, end, max step inside)."""
        return []

    def dt_limit(self, t) -> np.ndarray:
        """Largest safe step for each particle clock: resolve windows, never jump into one."""
        return windows_dt_limit(self.windows(), t)

    def magnetic_parts(self):
        """Split into ([(factor, profile), ...], non-magnetic remainder or None)."""
        return [], self

    def __add__(self, other: "ForceField") -> "ForceField":
        return SumField([self, other])

    def __neg__(self) -> "ForceField":
        return AmplitudeField(self, -1.0)

    def __sub__(self, other: "ForceField") -> "ForceField":
        return SumField([self, -other])


class ZeroField(ForceField):
    sup_norm = 0.0
    lipschitz = 0.0

    def __call__(self, t, x, v):
        return np.zeros(np.shape(x))

    def magnetic_parts(self):
        return [], None


class ConstantField(ForceField):
    def __init__(self, vector):
        self.vector = np.asarray(vector, dtype=float)
        self.sup_norm = float(np.linalg.norm(self.vector))
        self.lipschitz = 0.0

    def __call__(self, t, x, v):
        return np.broadcast_to(self.vector, np.shape(x)).copy()


class AnalyticField(ForceField):
    """User expression ``fn(t, x, v) -> (P, 2)`` with declared bounds."""

    def __init__(self, fn, sup_norm: float, lipschitz: float = math.inf, window=None):
        self.fn = fn
        self.sup_norm = float(sup_norm)
        self.lipschitz = float(lipschitz)
        self.window = window

    def __call__(self, t, x, v):
        out = np.asarray(self.fn(t, x, v), dtype=float)
        out = np.broadcast_to(out, np.shape(x)).copy()
        if self.window is not None:
            tt = _col(t, out.shape[0])
            out[(tt < self.window[0]) | (tt > self.window[1])] = 0.0
        return out


@dataclass
class MagneticProfile:
    grid: np.ndarray
    allow_negative: bool = False

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("magnetic profile must be finite")
        if not self.allow_negative and self.grid.min() < 0:
            raise ValueError("magnetic profile must be nonnegative")

    @classmethod
    def from_function(cls, fn, n: int = 256, allow_negative: bool = False) -> "MagneticProfile":
        pts = grid_points(n)
        return cls(np.asarray(fn(pts[:, 0], pts[:, 1]), float).reshape(n, n), allow_negative)

    @classmethod
    def constant(cls, value: float, n: int = 64) -> "MagneticProfile":
        return cls(np.full((n, n), float(value)), value < 0)

    @property
    def n(self) -> int:
        return self.grid.shape[0]

    @property
    def b_max(self) -> float:
        return float(self.grid.max())

    @property
    def b_min(self) -> float:
        return float(self.grid.min())

    @property
    def lip(self) -> float:
        g = self.grid
        d1 = np.abs(np.roll(g, -1, 0) - g).max()
        d2 = np.abs(np.roll(g, -1, 1) - g).max()
        return float(max(d1, d2) * self.n)

    def sample(self, x) -> np.ndarray:
        return sample_field(self.grid, x)

    def scaled(self, factor: float) -> "MagneticProfile":
        return MagneticProfile(self.grid * factor, self.allow_negative or factor < 0)

    def to_dict(self) -> dict:
        return {"n": self.n, "b_max": self.b_max, "b_min": self.b_min, "lip": self.lip}


class MagneticField(ForceField):
    """factor * b(x) * (v2, -v1); exactly orthogonal to v."""

    def __init__(self, profile: MagneticProfile, factor: float = 1.0):
        self.profile = profile
        self.factor = float(factor)
        self.lipschitz = math.inf

    @property
    def sup_norm(self) -> float:
        return math.inf

    def __call__(self, t, x, v):
        b = self.factor * self.profile.sample(x)
        return b[:, None] * perp(v)

    def magnetic_parts(self):
        return [(self.factor, self.profile)], None


class GridTerm:
    """amplitude(t) * grid(x) for t inside [start, end], zero outside.

    A grid of shape (2,) stands for a spatially uniform vector.
    """

    def __init__(self, amplitude, grid: np.ndarray, start: float, end: float, substeps: int = 48):
        if end <= start:
            raise ValueError("degenerate time window")
        self.amplitude = amplitude
        self.grid = np.asarray(grid, dtype=float)
        self.start = float(start)
        self.end = float(end)
        self.substeps = substeps
        self.uniform = self.grid.ndim == 1
        self.grid_sup = float(np.linalg.norm(self.grid, axis=-1).max())

    def value_at(self, t, x) -> np.ndarray:
        t = _col(t, x.shape[0])
        live = (t > self.start) & (t < self.end)
        out = np.zeros(x.shape)
        if live.any():
            a = np.asarray(self.amplitude(t[live]), dtype=float)
            shape = self.grid[None, :] if self.uniform else sample_field(self.grid, x[live])
            out[live] = a[:, None] * shape
        return out

    def window(self):
        if not np.isfinite(self.end - self.start):
            return None
        return (self.start, self.end, (self.end - self.start) / self.substeps)


class SeparableGridField(ForceField):
    """Sum of space-time separable grid terms; the workhorse for reference controls."""

    def __init__(self, terms: list[GridTerm], amp_sup: list[float] | None = None):
        self.terms = list(terms)
        sup = 0.0
        for k, term in enumerate(self.terms):
            a = amp_sup[k] if amp_sup else _amp_sup(term)
            sup += a * term.grid_sup
        self.sup_norm = sup

    def __call__(self, t, x, v):
        out = np.zeros(np.shape(x))
        for term in self.terms:
            out += term.value_at(t, x)
        return out

    def windows(self):
        return [w for w in (term.window() for term in self.terms) if w is not None]


def _amp_sup(term: GridTerm) -> float:
    lo = term.start if np.isfinite(term.start) else -100.0
    hi = term.end if np.isfinite(term.end) else 100.0
    ts = np.linspace(lo, hi, 2001)
    return float(np.abs(term.amplitude(ts)).max())


def potential_gradient_field(phi: np.ndarray, amplitude=None, window=(-math.inf, math.inf)):
    """Force grad(phi) (times an optional amplitude schedule)."""
    amp = amplitude if amplitude is not None else (lambda t: np.ones_like(np.asarray(t, float)))
    start, end = window
    term = GridTerm(amp, gradient(phi), start, end)
    return SeparableGridField([term], amp_sup=[1.0] if amplitude is None else None)


class KnotGridField(ForceField):
    """Vector grids at time knots, linear in time between knots, zero outside."""

    def __init__(self, times, grids):
        self.times = np.asarray(times, dtype=float)
        self.grids = np.asarray(grids, dtype=float)
        if self.times.ndim != 1 or self.times.size != self.grids.shape[0]:
            raise ValueError("one grid per knot required")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("knot times must increase")
        self.sup_norm = float(np.linalg.norm(self.grids, axis=-1).max()) if self.grids.size else 0.0

    def __call__(self, t, x, v):
        p = x.shape[0]
        t = _col(t, p)
        out = np.zeros(x.shape)
        live = (t >= self.times[0]) & (t <= self.times[-1])
        if not live.any():
            return out
        tl = t[live]
        k = np.clip(np.searchsorted(self.times, tl, side="right") - 1, 0, self.times.size - 2)
        s = (tl - self.times[k]) / (self.times[k + 1] - self.times[k])
        xl = x[live]
        res = np.empty((tl.size, 2))
        for kk in np.unique(k):
            m = k == kk
            g0 = sample_field(self.grids[kk], xl[m])
            g1 = sample_field(self.grids[kk + 1], xl[m])
            res[m] = (1 - s[m])[:, None] * g0 + s[m][:, None] * g1
        out[live] = res
        return out


class SumField(ForceField):
    def __init__(self, fields):
        flat = []
        for f in fields:
            flat.extend(f.fields if isinstance(f, SumField) else [f])
        self.fields = [f for f in flat if f is not None]

    @property
    def sup_norm(self) -> float:
        return float(sum(f.sup_norm for f in self.fields))

    @property
    def lipschitz(self) -> float:
        return float(sum(f.lipschitz for f in self.fields))

    def __call__(self, t, x, v):
        out = np.zeros(np.shape(x))
        for f in self.fields:
            out += f(t, x, v)
        return out

    def windows(self):
        return [w for f in self.fields for w in f.windows()]

    def magnetic_parts(self):
        mags, rest = [], []
        for f in self.fields:
            m, r = f.magnetic_parts()
            mags += m
            if r is not None:
                rest.append(r)
        if not rest:
            return mags, None
        return mags, rest[0] if len(rest) == 1 else SumField(rest)


class AmplitudeField(ForceField):
    """c * base."""

    def __init__(self, base: ForceField, c: float):
        self.base = base
        self.c = float(c)

    @property
    def sup_norm(self):
        return abs(self.c) * self.base.sup_norm

    @property
    def lipschitz(self):
        return abs(self.c) * self.base.lipschitz

    def __call__(self, t, x, v):
        return self.c * self.base(t, x, v)

    def windows(self):
        return self.base.windows()

    def magnetic_parts(self):
        mags, rest = self.base.magnetic_parts()
        mags = [(self.c * f, p) for f, p in mags]
        return mags, None if rest is None else AmplitudeField(rest, self.c)


class ScaledField(ForceField):
    """lam^2 * base(lam t, x, v/lam)."""

    def __init__(self, base: ForceField, lam: float):
        if lam == 0 or not np.isfinite(lam):
            raise ValueError("scaling parameter must be a nonzero finite real")
        self.base = base
        self.lam = float(lam)

    @property
    def sup_norm(self):
        return self.lam ** 2 * self.base.sup_norm

    @property
    def lipschitz(self):
        return self.lam ** 2 * self.base.lipschitz

    def __call__(self, t, x, v):
        return self.lam ** 2 * self.base(self.lam * np.asarray(t, float), x, np.asarray(v) / self.lam)

    def windows(self):
        out = []
        for a, b, h in self.base.windows():
            lo, hi = sorted((a / self.lam, b / self.lam))
            out.append((lo, hi, h / abs(self.lam)))
        return out

    def magnetic_parts(self):
        mags, rest = self.base.magnetic_parts()
        mags = [(self.lam * f, p) for f, p in mags]
        return mags, None if rest is None else ScaledField(rest, self.lam)


class ShiftedField(ForceField):
    """base(t + shift, x, v)."""

    def __init__(self, base: ForceField, shift: float):
        self.base = base
        self.shift = float(shift)
        self.sup_norm = base.sup_norm
        self.lipschitz = base.lipschitz

    def __call__(self, t, x, v):
        return self.base(np.asarray(t, float) + self.shift, x, v)

    def windows(self):
        return [(a - self.shift, b - self.shift, h) for a, b, h in self.base.windows()]

    def magnetic_parts(self):
        mags, rest = self.base.magnetic_parts()
        return mags, None if rest is None else ShiftedField(rest, self.shift)


class ReversedField(ForceField):
    """base(T - t, x, -v): the force seen by the time-reversed flow."""

    def __init__(self, base: ForceField, horizon: float):
        self.base = base
        self.horizon = float(horizon)
        self.sup_norm = base.sup_norm
        self.lipschitz = base.lipschitz

    def __call__(self, t, x, v):
        return self.base(self.horizon - np.asarray(t, float), x, -np.asarray(v))

    def windows(self):
        return [(self.horizon - b, self.horizon - a, h) for a, b, h in self.base.windows()]

    def magnetic_parts(self):
        mags, rest = self.base.magnetic_parts()
        mags = [(-f, p) for f, p in mags]
        return mags, None if rest is None else ReversedField(rest, self.horizon)


def windows_dt_limit(windows, t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.full(t.shape, np.inf)
    for a, b, h in windows:
        inside = (t >= a) & (t < b)
        out[inside] = np.minimum(out[inside], h)
        before = t < a
        out[before] = np.minimum(out[before], a - t[before])
    return out


# ------------------------------------------------------------ operations


def eval_force(field: ForceField, t, x, v) -> np.ndarray:
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    v2 = np.atleast_2d(np.asarray(v, dtype=float))
    out = field(t, x2, v2)
    return out[0] if np.ndim(x) == 1 else out


def scale_field(field: ForceField, lam: float) -> ForceField:
    return ScaledField(field, lam)


def scale_distribution(f, lam: float, n: int = 2):
    """Callable f^lam(t, x, v) = |lam|^(2-n) f(lam t, x, v/lam)."""
    if lam == 0:
        raise ValueError("scaling parameter must be nonzero")

    def scaled(t, x, v):
        return abs(lam) ** (2 - n) * f(lam * np.asarray(t, float), x, np.asarray(v, float) / lam)

    return scaled


def scale_particles(x, v, weight, measure, lam: float, n: int = 2):
    """Particle form of the scaling: a particle at v moves to lam*v.

    The carried value picks up |lam|^(2-n) and the phase-space cell volume
    |lam|^n, so total mass is multiplied by lam^2.
    """
    if lam == 0:
        raise ValueError("scaling parameter must be nonzero")
    return (np.array(x, dtype=float), lam * np.asarray(v, dtype=float),
            abs(lam) ** (2 - n) * np.asarray(weight, dtype=float),
            abs(lam) ** n * np.asarray(measure, dtype=float))


def reverse_data_for_lambda_minus_one(f1, force: ForceField, horizon: float):
    """Initial datum (x, v) -> f1(x, -v) and force (t, x, v) -> F(T - t, x, -v)."""

    def initial(x, v):
        return f1(x, -np.asarray(v, dtype=float))

    return initial, ReversedField(force, horizon)


def measured_sup(field: ForceField, t_range=(0.0, 1.0), v_cap: float = 10.0, n: int = 4000,
                 seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = rng.random((n, 2))
    v = (rng.random((n, 2)) * 2 - 1) * v_cap
    t = rng.uniform(*t_range, size=n)
    return float(np.linalg.norm(field(t, x, v), axis=1).max())

"""Fixed-point iteration for the controlled Vlasov-Poisson system.

An iterate g is stored only through the density of g - f-bar on a set of time
knots: that is the only functional of g the operator consumes, since the
self-consistent force is the gradient of the Poisson potential of the density.

One sweep of the operator:

1. Poisson-solve the stored densities at each knot (knot-linear force field);
2. carry the particles of f0 through absorbing transport under
   F + E-bar + grad(Delta^-1 rho_g), depositing density and current at the knots;
3. apply the extension operator (restriction outside the cutoff region,
   harmonic infill inside, mass-correcting bump) blended in time.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .absorption_transport import (GAMMA3, AbsorptionLog, BoundaryAtlas, OpacityFn, WeightedEnsemble, residual_mass_outside,
                                   transport_absorb)
from .characteristics import IntegrationError, propagate
from .control_synthesis import HyperplaneControl, ReferenceControl, build_bump, first_class_hits
from .fields import AnalyticField, ForceField, KnotGridField, ZeroField
from .poisson_spectral import deposit_cic, gradient_of_solution
from .torus_geometry import Ball, Region, grid_coords, min_image

DEFAULT_KNOTS = 64
DEFAULT_SOLVER_GRID = 128


class FixedPointError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ------------------------------------------------------------ extension


def _periodic_dilate(mask: np.ndarray, cells: int = 1) -> np.ndarray:
    out = mask.copy()
    for _ in range(cells):
        grown = out.copy()
        for s1 in (-1, 0, 1):
            for s2 in (-1, 0, 1):
                grown |= np.roll(np.roll(out, s1, 0), s2, 1)
        out = grown
    return out


class ExtensionOperator:
    """Restriction outside a cutoff region plus a smooth extension inside it.

    The extension of a nodal field is its discrete harmonic infill (five-point
    Laplacian, Dirichlet data from the surrounding nodes). Densities then get
    ``c * u`` added, with u a nonnegative bump of unit mass supported in the
    correction region and c chosen so the total mass equals the target.
    Currents are infilled without correction (u carries a radial velocity
    profile, so its current vanishes).
    """

    def __init__(self, cutoff: Region, correction_support: Region, n: int):
        self.cutoff = cutoff
        self.correction_support = correction_support
        self.n = n
        self.mask = cutoff.grid_mask(n)
        self.bump = _correction_bump(correction_support, n)
        self._factor = None
        self._index = None

    def _solver(self):
        if self._factor is None:
            n = self.n
            idx = -np.ones((n, n), dtype=np.int64)
            inside = np.flatnonzero(self.mask.ravel())
            idx.ravel()[inside] = np.arange(inside.size)
            rows, cols, vals = [np.arange(inside.size)], [np.arange(inside.size)], [np.full(inside.size, 4.0)]
            i, j = np.unravel_index(inside, (n, n))
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nb = idx[(i + di) % n, (j + dj) % n]
                ok = nb >= 0
                rows.append(np.arange(inside.size)[ok])
                cols.append(nb[ok])
                vals.append(-np.ones(int(ok.sum())))
            A = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(inside.size, inside.size))
            self._factor = splu(A)
            self._index = (inside, i, j)
        return self._factor, self._index

    def infill(self, values: np.ndarray) -> np.ndarray:
        """Keep ``values`` outside the cutoff, replace the inside by the harmonic infill."""
        if not self.mask.any():
            return np.array(values, dtype=float)
        n = self.n
        lu, (inside, i, j) = self._solver()
        outside_vals = np.where(self.mask, 0.0, values)
        rhs = np.zeros(inside.size)
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rhs += outside_vals[(i + di) % n, (j + dj) % n]
        out = np.array(outside_vals, dtype=float)
        out.ravel()[inside] = lu.solve(rhs)
        return out

    def extend(self, rho: np.ndarray, target_mass: float):
        """pi at the density level; returns (extended density, correction coefficient)."""
        ext = self.infill(rho)
        coeff = float(target_mass - ext.sum() / self.n ** 2)
        return ext + coeff * self.bump, coeff


def _correction_bump(support: Region, n: int) -> np.ndarray:
    """Smooth nonnegative bump in the first ball (or slab) of ``support`` with unit grid mass."""
    pts = np.stack(grid_coords(n), -1)
    if support.balls:
        ball = support.balls[0]
        r = np.linalg.norm(min_image(pts - np.asarray(ball.center)), axis=-1) / ball.radius
        raw = np.where(r < 1, np.exp(-1.0 / np.maximum(1 - r * r, 1e-300)), 0.0)
    elif support.slabs:
        slab = support.slabs[0]
        s = slab.signed_offset(pts) / slab.half_width
        raw = np.where(np.abs(s) < 1, np.exp(-1.0 / np.maximum(1 - s * s, 1e-300)), 0.0)
    else:
        raise ValueError("correction support must contain a ball or a slab")
    total = raw.sum() / n ** 2
    if not total > 0:
        raise ValueError("correction support is not resolved by the grid")
    return raw / total


def extend_pi(op: ExtensionOperator, rho_outside: np.ndarray, target_mass: float):
    return op.extend(rho_outside, target_mass)


def blend_Pi(op: ExtensionOperator, rho: np.ndarray, t: float, upsilon_tilde, target_mass: float) -> np.ndarray:
    """(1 - w) rho + w pi(rho) with w = Upsilon-tilde(t); the identity where w vanishes."""
    w = float(upsilon_tilde(t))
    if w == 0.0:
        return np.array(rho, dtype=float)
    ext, _ = op.extend(rho, target_mass)
    if w == 1.0:
        return ext
    return (1.0 - w) * rho + w * ext


# ------------------------------------------------------------- problems


@dataclass
class ControlProblem:
    """What the operator needs from a reference control, local or global."""

    kind: str
    horizon: float
    drive: ForceField          # F + E-bar (external force plus the reference drive)
    atlas: BoundaryAtlas
    cutoff: Region             # Pi restricts outside this region
    correction: Region         # support of the mass-correcting bump
    omega: Region              # control zone used for the residual-mass check
    rho_bar: object            # t -> reference density on the reference grid
    rho_bar_rate: object
    reference_grid: int
    window: tuple              # rendezvous window, for relevance diagnostics

    def rho_bar_on(self, t: float, n: int) -> np.ndarray:
        full = self.rho_bar(t)
        return _coarsen(full, n)

    def rho_bar_rate_on(self, t: float, n: int) -> np.ndarray:
        return _coarsen(self.rho_bar_rate(t), n)


def _coarsen(grid: np.ndarray, n: int) -> np.ndarray:
    m = grid.shape[0]
    if m == n:
        return grid
    if m % n:
        raise ValueError(f"reference grid {m} is not a multiple of {n}")
    step = m // n
    return grid[::step, ::step]


def problem_for(ctl, F: ForceField | None = None, omega: Region | None = None) -> ControlProblem:
    F = F if F is not None else ZeroField()
    if isinstance(ctl, ReferenceControl):
        T = ctl.horizon
        window = (T / 24, 23 * T / 24) if ctl.variant == "bounded" else (T / 12, 11 * T / 12)
        region = ctl.control_region()
        return ControlProblem(
            "local", T, F + ctl.e_field(), ctl.sphere_atlas(), region,
            Region(balls=(Ball(tuple(ctl.x0), ctl.r0),)), omega if omega is not None else region,
            ctl.rho, ctl.rho_rate, ctl.grid, window)
    if isinstance(ctl, HyperplaneControl):
        T = ctl.horizon
        term = ctl.term()
        lap = term.lap

        def rho(t):
            return float(term.amplitude(t)) * lap if term.start < t < term.end else np.zeros_like(lap)

        def rate(t):
            return float(term.amplitude_rate(t)) * lap if term.start < t < term.end else np.zeros_like(lap)

        region = ctl.control_region()
        return ControlProblem(
            "global", T, F + ctl.e_field(), ctl.atlas(), region, Region(slabs=(ctl.slab,)),
            omega if omega is not None else region, rho, rate, lap.shape[0], (T / 24, 23 * T / 24))
    raise TypeError(f"unsupported control {type(ctl).__name__}")


# -------------------------------------------------------------- iterate


@dataclass
class FixedPointSettings:
    grid: int = DEFAULT_SOLVER_GRID
    knots: int = DEFAULT_KNOTS
    dt_max: float = 1e-2
    step_floor: float | None = None     # defaults to a fifth of the absorbing-surface scale
    max_length: float = 0.5
    workers: int = 1
    eps: float = 1e-2                   # membership radius for the density perturbation
    gamma: float = 3.0                  # decay exponent used by the weighted diagnostic


@dataclass
class IterationState:
    index: int
    knots: np.ndarray
    rho: np.ndarray                      # density of g - f-bar at the knots, (K, N, N)
    current: np.ndarray | None = None    # matching current, (K, N, N, 2)
    ensemble: WeightedEnsemble | None = None
    gap: float = math.inf
    mass: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    transported: np.ndarray | None = None   # raw transported density at the knots
    absorbed: np.ndarray | None = None      # absorbed mass density per knot interval

    @property
    def grid(self) -> int:
        return self.rho.shape[1]


def initial_state(f0: WeightedEnsemble, problem: ControlProblem, settings: FixedPointSettings) -> IterationState:
    """g0 = f-bar + f0: the density of f0 frozen at every knot."""
    knots = np.linspace(0.0, problem.horizon, settings.knots)
    n = settings.grid
    rho0 = deposit_cic(f0.x, f0.mass_per_particle, n) if len(f0) else np.zeros((n, n))
    rho = np.repeat(rho0[None], knots.size, axis=0)
    mass = rho.sum(axis=(1, 2)) / n ** 2
    return IterationState(0, knots, rho, mass=mass)


def self_consistent_field(state: IterationState) -> ForceField:
    """grad(phi^g) - grad(phi-bar), linear in time between knots."""
    if not np.any(state.rho):
        return ZeroField()
    grads = np.stack([gradient_of_solution(r) for r in state.rho])
    return KnotGridField(state.knots, grads)


def _step_floor(problem: ControlProblem, settings: FixedPointSettings) -> float:
    if settings.step_floor is not None:
        return settings.step_floor
    if problem.atlas.kind == "sphere":
        return problem.atlas.ball.radius / 10
    return problem.atlas.slab.half_width / 5


def _transport_segment(ens, force, t0, t1, problem, U, window, settings, log):
    kw = dict(dt=settings.dt_max, step_length=_step_floor(problem, settings), max_length=settings.max_length)
    if settings.workers <= 1 or len(ens) < 2 * settings.workers:
        return transport_absorb(ens, force, t0, t1, problem.atlas, U, window, log=log, **kw)
    chunks = np.array_split(np.arange(len(ens)), settings.workers)
    logs = [AbsorptionLog() for _ in chunks]
    with ThreadPoolExecutor(settings.workers) as pool:
        parts = list(pool.map(lambda a: transport_absorb(ens.subset(a[0]), force, t0, t1, problem.atlas, U,
                                                         window, log=a[1], **kw), zip(chunks, logs)))
    for lg in logs:
        for name in ("t", "x", "v", "mass", "ids"):
            getattr(log, name).extend(getattr(lg, name))
    out = WeightedEnsemble(np.concatenate([p.x for p in parts]), np.concatenate([p.v for p in parts]),
                           np.concatenate([p.weight for p in parts]), np.concatenate([p.measure for p in parts]),
                           crossings=np.concatenate([p.crossings for p in parts]),
                           ids=np.concatenate([p.ids for p in parts]),
                           speed0=np.concatenate([p.speed0 for p in parts]), t=t1)
    out.culled_mass = ens.culled_mass + sum(p.culled_mass - ens.culled_mass for p in parts)
    return out


def _moments(ens: WeightedEnsemble, n: int):
    if len(ens) == 0:
        return np.zeros((n, n)), np.zeros((n, n, 2))
    m = ens.mass_per_particle
    rho = deposit_cic(ens.x, m, n)
    cur = np.stack([deposit_cic(ens.x, m * ens.v[:, 0], n), deposit_cic(ens.x, m * ens.v[:, 1], n)], -1)
    return rho, cur


def apply_V(state: IterationState, f0: WeightedEnsemble, problem: ControlProblem,
            settings: FixedPointSettings, extension: ExtensionOperator | None = None,
            perturbation: ForceField | None = None) -> IterationState:
    """One sweep of the operator; the new state's densities are those of Pi(f) at the knots.

    Besides the blended densities the state keeps the raw transported densities,
    the particle currents and the absorbed mass of each knot interval, which is
    what the residual reconstruction needs.
    """
    n = settings.grid
    knots = state.knots
    target = f0.total_mass
    ext = extension or ExtensionOperator(problem.cutoff, problem.correction, n)
    T = problem.horizon
    ups = build_bump("Upsilon", T)
    ups2 = build_bump("Upsilon_tilde", T)
    U = OpacityFn(problem.atlas)
    force = problem.drive + self_consistent_field(state)
    if perturbation is not None:
        force = force + perturbation
    rho = np.zeros((knots.size, n, n))
    raw = np.zeros((knots.size, n, n))
    cur = np.zeros((knots.size, n, n, 2))
    lost = np.zeros((knots.size - 1, n, n))
    ens = f0.copy()
    ens.t = knots[0]
    for k in range(knots.size):
        if k > 0:
            log = AbsorptionLog()
            try:
                ens = _transport_segment(ens, force, knots[k - 1], knots[k], problem, U, ups, settings, log)
            except IntegrationError as exc:
                raise FixedPointError("transport", str(exc)) from exc
            _, lx, _, lm, _ = log.arrays()
            if lm.size:
                lost[k - 1] = deposit_cic(lx, lm, n)
        raw[k], c = _moments(ens, n)
        rho[k] = blend_Pi(ext, raw[k], knots[k], ups2, target)
        w = float(ups2(knots[k]))
        cur[k] = c if w == 0.0 else (1 - w) * c + w * np.stack([ext.infill(c[..., 0]), ext.infill(c[..., 1])], -1)
    mass = rho.sum(axis=(1, 2)) / n ** 2
    gap = float(np.abs(rho - state.rho).max())
    diag = {
        "mass_drift": float(np.abs(mass - target).max()),
        "transported_mass_final": float(raw[-1].sum() / n ** 2),
        "absorbed_mass": float(lost.sum() / n ** 2),
        "culled_mass": float(ens.culled_mass),
        "point_a_sup_density": float(np.abs(rho).max()),
        "point_a_ok": bool(np.abs(rho).max() <= settings.eps),
        "point_b_weighted_sup": _weighted_sup(f0, settings.gamma),
        "point_c_holder_quotient": _holder_quotient(rho, n),
        "point_d_ok": bool(np.abs(mass - target).max() <= 1e-10 * max(1.0, abs(target))),
    }
    out = IterationState(state.index + 1, knots, rho, cur, ens, gap, mass, diag)
    out.transported = raw
    out.absorbed = lost
    return out


def _weighted_sup(ens: WeightedEnsemble, gamma: float) -> float:
    if len(ens) == 0:
        return 0.0
    return float(np.max(np.abs(ens.weight) * (1 + np.linalg.norm(ens.v, axis=1)) ** gamma))


def _holder_quotient(rho: np.ndarray, n: int, exponent: float = 0.5) -> float:
    """Largest neighbour difference divided by h^exponent (grid-scale Hoelder quotient)."""
    h = 1.0 / n
    d1 = np.abs(np.diff(rho, axis=1, append=rho[:, :1])).max(initial=0.0)
    d2 = np.abs(np.diff(rho, axis=2, append=rho[:, :, :1])).max(initial=0.0)
    return float(max(d1, d2) / h ** exponent)


# ----------------------------------------------------------- G residual


def reconstruct_G(state: IterationState, problem: ControlProblem, dilation_cells: int = 1) -> dict:
    """Zeroth velocity moment of the Vlasov residual of f = f-bar + Pi(f~), per knot interval.

    Integrating the Vlasov operator in v removes the force term, leaving
    d_t rho + div j. Two discretisations are reported.

    * Conservative (used for the support check): time differences across each
      knot interval with the charge-conserving current of the particle paths.
      That current satisfies D_t rho~ + D.J = -(absorbed mass at the crossing
      points)/dt exactly, so the residual reduces to
      D_t rho-bar + D_t(rho_Pi - rho~) - absorbed/dt; it is nonzero only where
      the reference source, the extension or the absorption acts.
    * Centred: centred differences in time between knots and in space of the
      cloud-in-cell density and current. This one carries particle sampling
      noise and is kept as a diagnostic.
    """
    n = state.grid
    knots = state.knots
    if state.current is None or state.transported is None:
        raise ValueError("state has no transport history; run apply_V first")
    outside = ~_periodic_dilate(problem.omega.grid_mask(n), dilation_cells)
    sup = out_sup = 0.0
    for k in range(knots.size - 1):
        dt = knots[k + 1] - knots[k]
        ref = (problem.rho_bar_on(knots[k + 1], n) - problem.rho_bar_on(knots[k], n)) / dt
        mod = ((state.rho[k + 1] - state.transported[k + 1]) - (state.rho[k] - state.transported[k])) / dt
        g = ref + mod - state.absorbed[k] / dt
        sup = max(sup, float(np.abs(g).max()))
        if outside.any():
            out_sup = max(out_sup, float(np.abs(g[outside]).max()))
    h = 1.0 / n
    c_sup = c_out = 0.0
    for k in range(1, knots.size - 1):
        d_rho = (state.rho[k + 1] - state.rho[k - 1]) / (knots[k + 1] - knots[k - 1])
        j = state.current[k]
        div = ((np.roll(j[..., 0], -1, 0) - np.roll(j[..., 0], 1, 0))
               + (np.roll(j[..., 1], -1, 1) - np.roll(j[..., 1], 1, 1))) / (2 * h)
        g = problem.rho_bar_rate_on(knots[k], n) + d_rho + div
        c_sup = max(c_sup, float(np.abs(g).max()))
        if outside.any():
            c_out = max(c_out, float(np.abs(g[outside]).max()))
    ratio = out_sup / sup if sup > 0 else 0.0
    return {"sup": sup, "outside_sup": out_sup, "ratio": ratio, "dilation_cells": dilation_cells,
            "support_ok": bool(ratio <= 1e-6),
            "centred_sup": c_sup, "centred_outside_sup": c_out,
            "centred_ratio": c_out / c_sup if c_sup > 0 else 0.0}


# -------------------------------------------------------------- reports


@dataclass
class ControlReport:
    converged: bool
    iterations: int
    initial_mass: float
    residual_outside: float
    residual_tolerance: float
    gap_history: list = field(default_factory=list)
    mass_history: list = field(default_factory=list)
    residual_history: list = field(default_factory=list)
    G: dict = field(default_factory=dict)
    relevance: dict = field(default_factory=dict)
    failure: str | None = None
    extra: dict = field(default_factory=dict)
    state: IterationState | None = None

    @property
    def residual_fraction(self) -> float:
        return self.residual_outside / self.initial_mass if self.initial_mass else 0.0

    @property
    def relevant(self) -> bool:
        return abs(self.residual_outside) <= self.residual_tolerance * max(abs(self.initial_mass), 1e-300) \
            or self.initial_mass == 0.0

    @property
    def success(self) -> bool:
        return self.converged and self.relevant and bool(self.G.get("support_ok", True)) and self.failure is None

    def to_dict(self) -> dict:
        return {"converged": self.converged, "iterations": self.iterations, "success": self.success,
                "relevant": self.relevant, "initial_mass": self.initial_mass,
                "residual_outside": self.residual_outside, "residual_fraction": self.residual_fraction,
                "residual_tolerance": self.residual_tolerance, "gap_history": self.gap_history,
                "mass_history": self.mass_history, "G": self.G, "relevance": self.relevance,
                "failure": self.failure, "extra": self.extra}

    def to_text(self) -> str:
        return json.dumps(_plain(self.to_dict()), indent=2, sort_keys=True)

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "gap", "mass", "residual_outside_omega"])
        for k, (g, m, r) in enumerate(zip(self.gap_history, self.mass_history, self.residual_history), 1):
            w.writerow([k, repr(g), repr(m), repr(r)])
        return buf.getvalue()


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def run_fixed_point(f0: WeightedEnsemble, ctl, F: ForceField | None = None, eps: float = 1e-2,
                    max_iters: int = 20, tol: float = 1e-6, *, residual_tolerance: float = 0.01,
                    settings: FixedPointSettings | None = None, omega: Region | None = None,
                    log=None) -> ControlReport:
    """Iterate the operator from g0 = f-bar + f0 until the density gap drops below ``tol``."""
    settings = settings or FixedPointSettings(eps=eps)
    problem = ctl if isinstance(ctl, ControlProblem) else problem_for(ctl, F, omega)
    ext = ExtensionOperator(problem.cutoff, problem.correction, settings.grid)
    state = initial_state(f0, problem, settings)
    M0 = f0.total_mass
    report = ControlReport(False, 0, M0, math.nan, residual_tolerance)
    t_start = time.time()
    for it in range(max_iters):
        try:
            new = apply_V(state, f0, problem, settings, ext)
        except FixedPointError as exc:
            report.failure = str(exc)
            break
        residual = residual_mass_outside(new.ensemble, problem.omega) if new.ensemble is not None else 0.0
        report.gap_history.append(new.gap)
        report.mass_history.append(float(new.mass.max() if new.mass.size else 0.0))
        report.residual_history.append(residual)
        report.extra.setdefault("mass_drift", []).append(new.diagnostics["mass_drift"])
        report.extra.setdefault("diagnostics", []).append(new.diagnostics)
        if log:
            log(f"iteration {new.index}: gap={new.gap:.3e} drift={new.diagnostics['mass_drift']:.2e} "
                f"residual={residual:.3e}")
        state = new
        report.iterations = new.index
        if not math.isfinite(new.gap):
            report.failure = "[iterate] density gap is not finite"
            break
        if new.gap < tol:
            report.converged = True
            break
    report.extra["runtime_s"] = time.time() - t_start
    report.state = state
    if state.ensemble is not None:
        report.residual_outside = residual_mass_outside(state.ensemble, problem.omega)
        report.G = reconstruct_G(state, problem)
        report.relevance = _relevance(state.ensemble, problem)
    else:
        report.residual_outside = 0.0
    return report


def _relevance(ens: WeightedEnsemble, problem: ControlProblem, limit: int = 20) -> dict:
    """Particles still carrying weight outside the control zone at the horizon missed the absorbing class."""
    if len(ens) == 0:
        return {"survivors_outside": 0, "missed_ids": []}
    out = ~problem.omega.contains(ens.x) & (ens.weight != 0)
    ids = ens.ids[out][:limit].tolist()
    return {"survivors_outside": int(out.sum()), "missed_ids": ids,
            "max_crossings": int(ens.crossings.max()) if len(ens) else 0}


# ------------------------------------------------------------ global case


def run_global(f0: WeightedEnsemble, ctl_factory, F: ForceField | None = None, *, eps: float = 1e-2,
               lam0: float = 1.0, lam_min: float = 2.0 ** -10, max_iters: int = 20, tol: float = 1e-6,
               residual_tolerance: float = 0.01, settings: FixedPointSettings | None = None,
               log=None) -> ControlReport:
    """Scale the data by lambda (halving) until its mass is at most eps and the fixed point succeeds.

    ``ctl_factory(lam)`` returns the certified hyperplane control for the scaled force.
    The successful report records lambda and the horizon of the unscaled solution.
    """
    from .fields import ScaledField

    F = F if F is not None else ZeroField()
    attempts = []
    lam = lam0
    M0 = f0.total_mass
    if len(f0) == 0 or M0 == 0.0:
        ctl = ctl_factory(lam)
        rep = run_fixed_point(f0, ctl, F, eps, max_iters, tol, residual_tolerance=residual_tolerance,
                              settings=settings, log=log)
        rep.extra["lambda"] = lam
        rep.extra["unscaled_horizon"] = lam * ctl.horizon
        return rep
    last = None
    while lam >= lam_min:
        scaled = f0.scaled(lam)
        mass = scaled.total_mass
        if abs(mass) > eps:
            attempts.append({"lambda": lam, "mass": mass, "skipped": "mass above eps"})
            lam /= 2
            continue
        F_lam = ScaledField(F, lam) if lam != 1.0 else F
        ctl = ctl_factory(lam)
        rep = run_fixed_point(scaled, ctl, F_lam, eps, max_iters, tol, residual_tolerance=residual_tolerance,
                              settings=settings, log=log)
        attempts.append({"lambda": lam, "mass": mass, "converged": rep.converged, "success": rep.success,
                         "residual_fraction": rep.residual_fraction})
        if log:
            log(f"lambda={lam:g} mass={mass:.3e} success={rep.success}")
        last = rep
        if rep.success:
            rep.extra["lambda"] = lam
            rep.extra["unscaled_horizon"] = lam * ctl.horizon
            rep.extra["lambda_attempts"] = attempts
            return rep
        lam /= 2
    if last is None:
        last = ControlReport(False, 0, M0, math.nan, residual_tolerance)
    last.failure = last.failure or "[lambda] underflow: no scale made the fixed point succeed"
    last.extra["lambda_attempts"] = attempts
    return last


def unscale_time(t, lam: float):
    """Time of the original problem that corresponds to time t of the scaled one."""
    return lam * np.asarray(t, dtype=float)


# ------------------------------------------------------- verifications


def verify_nonconcentration(force: ForceField, x, y, knots) -> dict:
    """Bi-Lipschitz constant of the flow from rest over sampled pairs and knots."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    d0 = np.linalg.norm(min_image(x - y), axis=1)
    if np.any(d0 == 0):
        raise ValueError("pairs must be distinct")
    pts = np.concatenate([x, y])
    vel = np.zeros_like(pts)
    lo, hi = math.inf, 0.0
    knots = np.asarray(knots, dtype=float)
    p = x.shape[0]
    t_prev = knots[0]
    for t in knots[1:]:
        pts, vel, _, _ = propagate(pts, vel, force, t_prev, t, dt_max=(t - t_prev) / 8, step_length=1e9)
        d = np.linalg.norm(min_image(pts[:p] - pts[p:]), axis=1)
        ratio = d / d0
        lo = min(lo, float(ratio.min()))
        hi = max(hi, float(ratio.max()))
        t_prev = t
    if lo == 0.0:
        return {"c": math.inf, "min_ratio": 0.0, "max_ratio": hi, "concentration": True}
    return {"c": max(hi, 1.0 / lo), "min_ratio": lo, "max_ratio": hi, "concentration": False}


def perturbing_potential(eps: float, seed: int = 0, modes: int = 4) -> AnalyticField:
    """grad(psi) for a smooth random potential psi with sup |grad psi| <= eps.

    psi(t, x) = sum_k a_k cos(omega_k t) cos(2 pi k . x + p_k); the gradient bound
    sum_k |a_k| 2 pi |k| is scaled to eps, so the sup is a rigorous upper bound.
    """
    rng = np.random.default_rng(seed)
    ks = rng.integers(-2, 3, size=(modes, 2))
    ks[np.all(ks == 0, axis=1)] = (1, 0)
    amp = rng.normal(size=modes)
    phase = rng.uniform(0, 2 * np.pi, modes)
    omega = rng.uniform(0, 6, modes)
    bound = float(np.sum(np.abs(amp) * 2 * np.pi * np.linalg.norm(ks, axis=1)))
    amp = amp * (eps / bound if bound > 0 else 0.0)

    def fn(t, x, v):
        t = np.broadcast_to(np.asarray(t, float), (x.shape[0],))
        arg = 2 * np.pi * (x @ ks.T) + phase
        coef = -amp * np.cos(np.outer(t, omega)) * np.sin(arg) * 2 * np.pi
        return coef @ ks.astype(float)

    return AnalyticField(fn, sup_norm=eps)


@dataclass
class RendezvousReport:
    window: tuple
    samples: int
    hit_times: np.ndarray
    failures: list

    @property
    def fraction(self) -> float:
        return float(np.isfinite(self.hit_times).mean()) if self.samples else 1.0

    @property
    def passed(self) -> bool:
        return self.samples > 0 and not self.failures

    def to_dict(self) -> dict:
        return {"window": list(self.window), "samples": self.samples, "fraction": self.fraction,
                "passed": self.passed, "failures": self.failures[:50]}


def verify_rendezvous(ctl: ReferenceControl, F: ForceField | None, x, v, *,
                      perturbation: ForceField | None = None, chunk: int = 2500) -> RendezvousReport:
    """Each state must cross into the gamma3- class of S(x0, r0) inside the lemma's window.

    Forces: F + E-bar (+ the optional perturbation standing in for grad phi^f).
    Failures carry the proof's two-case split on |V(T/3)| against M.
    """
    T = ctl.horizon
    window = (T / 24, 23 * T / 24) if ctl.variant == "bounded" else (T / 12, 11 * T / 12)
    force = ctl.reference_force(F)
    if perturbation is not None:
        force = force + perturbation
    atlas = ctl.sphere_atlas()
    x = np.atleast_2d(np.asarray(x, float))
    v = np.atleast_2d(np.asarray(v, float))
    hits = np.full(x.shape[0], np.nan)
    for s in range(0, x.shape[0], chunk):
        sl = slice(s, s + chunk)
        hits[sl] = first_class_hits(force, atlas, x[sl], v[sl], 0.0, window[1], window, GAMMA3, ctl.r0 / 10)
    failures = []
    bad = np.flatnonzero(~np.isfinite(hits))
    if bad.size:
        M = float(ctl.thresholds.get("M", math.nan))
        _, vb, _, _ = propagate(x[bad], v[bad], force, 0.0, T / 3, dt_max=T / 288, step_length=0.25)
        speeds = np.linalg.norm(vb, axis=1)
        for i, k in enumerate(bad):
            failures.append({"index": int(k), "x": x[k].tolist(), "v": v[k].tolist(),
                             "speed_at_T_over_3": float(speeds[i]),
                             "case": "fast" if speeds[i] >= M else "slow"})
    return RendezvousReport(window, int(x.shape[0]), hits, failures)


def certify_perturbation_margin(ctl: ReferenceControl, F: ForceField | None, x, v, *, eps_start: float = 1.0,
                                halvings: int = 10, n_fields: int = 2, seed: int = 0, log=None) -> dict:
    """Largest eps (halving from eps_start) such that random perturbing potentials of sup eps keep 100%."""
    eps = eps_start
    tried = []
    for _ in range(halvings + 1):
        ok = True
        for k in range(n_fields):
            rep = verify_rendezvous(ctl, F, x, v, perturbation=perturbing_potential(eps, seed + k))
            if not rep.passed:
                ok = False
                break
        tried.append((eps, ok))
        if log:
            log(f"perturbation eps={eps:g} pass={ok}")
        if ok:
            return {"eps": eps, "samples": int(np.atleast_2d(x).shape[0]), "fields": n_fields, "tried": tried}
        eps /= 2
    return {"eps": 0.0, "samples": int(np.atleast_2d(x).shape[0]), "fields": n_fields, "tried": tried}


def speed_modulus_check(force: ForceField, x, v, horizon: float, bound_rate: float, n_times: int = 16) -> dict:
    """Largest | |v| - |V(t)| | - (1 + t * bound_rate) over samples and check times (should be <= 0)."""
    x = np.atleast_2d(np.asarray(x, float))
    v = np.atleast_2d(np.asarray(v, float))
    s0 = np.linalg.norm(v, axis=1)
    worst = -math.inf
    t_prev = 0.0
    xc, vc = x, v
    for t in np.linspace(0, horizon, n_times + 1)[1:]:
        xc, vc, _, _ = propagate(xc, vc, force, t_prev, t, dt_max=horizon / 256, step_length=0.25)
        excess = np.abs(s0 - np.linalg.norm(vc, axis=1)) - (1 + t * bound_rate)
        worst = max(worst, float(excess.max()))
        t_prev = t
    return {"worst_excess": worst, "ok": worst <= 0.0}


def analytic_initial_data(kappa: float, gamma: float = 3.0, mode=(1, 0), modulation: float = 0.5):
    """kappa (1 + modulation cos(2 pi k.x)) (1 + |v|)^(-gamma - 1): nonnegative, decaying, smooth in x."""
    k = np.asarray(mode, dtype=float)

    def f0(x, v):
        x = np.atleast_2d(x)
        v = np.atleast_2d(v)
        space = 1.0 + modulation * np.cos(2 * np.pi * (x @ k))
        return kappa * space * (1.0 + np.linalg.norm(v, axis=1)) ** (-gamma - 1)

    return f0

"""Joint Brownian / marked-point-process scenario generation.

Builds time grids, simulates coupled Brownian increments and marked jump
events together with their predictable compensators, and provides the
weighted-norm and martingale diagnostics consumed by the backward solvers.

Jump times are drawn by thinning against a per-interval constant envelope,
so they are exact in distribution; only clock integrals carry an O(dt)
quadrature bias (trapezoid between nodes).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError

FINITE = "finite"
GAUSSIAN = "gaussian"
PROCESS = "process"

CONSTANT_INTENSITY = "constant-intensity"
TIME_VARYING_INTENSITY = "time-varying-intensity"
POPULATION_MORTALITY = "population-mortality"
LOCAL_TIME_CLOCK = "local-time-clock"

# statistical diagnostics are unreliable below this many paths
MIN_PATHS_FOR_STATS = 100

_ENVELOPE_SAMPLES = 65
_ENVELOPE_PAD = 1.05


# ---------------------------------------------------------------------------
# time grid


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing nodes t_0 = 0 < ... < t_m = T."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        object.__setattr__(self, "nodes", nodes)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ConfigError("grid needs at least two nodes")
        if nodes[0] != 0.0:
            raise ConfigError("grid must start at t = 0")
        if not np.all(np.diff(nodes) > 0):
            raise ConfigError("grid nodes must be strictly increasing")
        if not np.all(np.isfinite(nodes)):
            raise ConfigError("grid nodes must be finite")

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    @property
    def steps(self) -> int:
        return self.nodes.size - 1

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.nodes)


def build_grid(horizon: float, steps: int, refinement: str = "uniform",
               ratio: float = 1.05) -> TimeGrid:
    """Build a time grid on [0, horizon] with the given number of steps.

    refinement "uniform" gives equal spacing; "geometric" grows step sizes
    by a constant factor (finer near zero for ratio > 1).
    """
    if not np.isfinite(horizon) or horizon <= 0:
        raise ConfigError(f"horizon must be positive, got {horizon}")
    if steps < 1:
        raise ConfigError(f"need at least one step, got {steps}")
    if refinement == "uniform":
        nodes = np.linspace(0.0, horizon, steps + 1)
    elif refinement == "geometric":
        if ratio <= 0 or ratio == 1.0:
            raise ConfigError("geometric refinement needs ratio > 0, != 1")
        weights = ratio ** np.arange(steps)
        nodes = np.concatenate([[0.0], np.cumsum(weights)])
        nodes *= horizon / nodes[-1]
        nodes[-1] = horizon
    else:
        raise ConfigError(f"unknown refinement {refinement!r}")
    return TimeGrid(nodes)


# ---------------------------------------------------------------------------
# marks and compensators


@dataclass(frozen=True)
class MarkSpace:
    """Finite ordered mark space with selection probabilities.

    kind "finite" is the solver-grade space; "gaussian" (standard normal
    marker) and "process" (marker equals a carried process value at the
    jump) are supported for simulation and compensator checks only.
    """

    labels: tuple
    probs: np.ndarray
    kind: str = FINITE

    def __post_init__(self):
        labels = tuple(self.labels)
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "probs", probs)
        if self.kind not in (FINITE, GAUSSIAN, PROCESS):
            raise ConfigError(f"unknown mark-space kind {self.kind!r}")
        if len(labels) == 0:
            raise ConfigError("mark space must be non-empty")
        if len(set(labels)) != len(labels):
            raise ConfigError("mark labels must be unique")
        if self.kind != FINITE:
            if len(labels) != 1:
                raise ConfigError("continuous marker spaces carry one label")
            return
        if probs.shape != (len(labels),):
            raise ConfigError("probs must align with labels")
        if np.any(probs <= 0) or np.any(probs > 1):
            raise ConfigError("mark probabilities must lie in (0, 1]")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ConfigError(f"mark probabilities sum to {probs.sum()}, not 1")

    @property
    def size(self) -> int:
        return len(self.labels)

    @classmethod
    def single(cls) -> "MarkSpace":
        return cls(("jump",), np.array([1.0]))


@dataclass(frozen=True)
class CompensatorSpec:
    """Jump-intensity model: per-mark rate t -> lambda_t(e) plus a kind.

    The mark-e compensator mass over dt is lambda_t(e) * p(e), scaled by
    the survivor count for population mortality. `envelope`, when given,
    must bound sum_e lambda_t(e) p(e) on [0, horizon]; otherwise a padded
    sampled bound per grid interval is used.
    """

    kind: str
    intensity: Callable[[float], np.ndarray] | None = None
    population: int | None = None
    envelope: float | None = None
    gbm: tuple | None = None  # (drift, vol, spot) for the process marker
    local_time_substeps: int = 100

    def __post_init__(self):
        kinds = (CONSTANT_INTENSITY, TIME_VARYING_INTENSITY,
                 POPULATION_MORTALITY, LOCAL_TIME_CLOCK)
        if self.kind not in kinds:
            raise ConfigError(f"unknown compensator kind {self.kind!r}")
        if self.kind == POPULATION_MORTALITY:
            if self.population is None or self.population < 0:
                raise ConfigError("population-mortality needs population >= 0")
        if self.kind != LOCAL_TIME_CLOCK and self.intensity is None:
            raise ConfigError("intensity function required")

    @classmethod
    def constant(cls, rate, **kw) -> "CompensatorSpec":
        """Constant per-mark rate; scalar rates apply to every mark."""
        rate_arr = np.atleast_1d(np.asarray(rate, dtype=float))
        if np.any(rate_arr < 0) or not np.all(np.isfinite(rate_arr)):
            raise ConfigError("intensity must be finite and non-negative")
        return cls(kind=CONSTANT_INTENSITY, intensity=lambda t: rate_arr, **kw)

    @classmethod
    def time_varying(cls, fn: Callable[[float], np.ndarray],
                     envelope: float | None = None, **kw) -> "CompensatorSpec":
        return cls(kind=TIME_VARYING_INTENSITY,
                   intensity=lambda t: np.atleast_1d(np.asarray(fn(t), dtype=float)),
                   envelope=envelope, **kw)

    @classmethod
    def mortality(cls, population: int, rate, **kw) -> "CompensatorSpec":
        """Per-cause hazard applied to each survivor of a pool."""
        if callable(rate):
            fn = lambda t: np.atleast_1d(np.asarray(rate(t), dtype=float))
        else:
            rate_arr = np.atleast_1d(np.asarray(rate, dtype=float))
            fn = lambda t: rate_arr
        return cls(kind=POPULATION_MORTALITY, intensity=fn,
                   population=population, **kw)

    @classmethod
    def local_time(cls, substeps: int = 100) -> "CompensatorSpec":
        return cls(kind=LOCAL_TIME_CLOCK, local_time_substeps=substeps)


# ---------------------------------------------------------------------------
# paths


@dataclass(frozen=True)
class MppPath:
    """One realisation of the marked point process on (0, T]."""

    times: np.ndarray           # strictly increasing event times
    marks: np.ndarray           # integer mark indices
    mark_values: np.ndarray     # marker values (labels index for finite)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        marks = np.asarray(self.marks, dtype=np.int64)
        values = np.asarray(self.mark_values, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "mark_values", values)
        if times.size and not np.all(np.diff(times) > 0):
            raise ConfigError("event times must be strictly increasing")
        if times.size and times[0] <= 0:
            raise ConfigError("event times live in (0, T]")
        if marks.shape != times.shape or values.shape != times.shape:
            raise ConfigError("event arrays must be aligned")

    @property
    def count(self) -> int:
        return self.times.size

    def counts_before(self, t: float) -> int:
        """N_{t-}: events strictly before t."""
        return int(np.searchsorted(self.times, t, side="left"))


@dataclass(frozen=True)
class PathBundle:
    """Immutable container of joint scenarios on a grid.

    clock and comp_mass may carry a leading axis of size 1 when they are
    deterministic (shared by all paths); numpy broadcasting handles both
    layouts transparently downstream.
    """

    grid: TimeGrid
    marks: MarkSpace
    brownian_increments: np.ndarray   # [J, m, d]
    events: tuple                     # J MppPath objects
    clock: np.ndarray                 # [J or 1, m+1], A at nodes
    counts: np.ndarray                # [J, m+1, E], cumulative per-mark counts
    comp_mass: np.ndarray             # [J or 1, m, E], compensator mass per interval
    seed: int
    kind: str
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        dw = np.asarray(self.brownian_increments, dtype=float)
        object.__setattr__(self, "brownian_increments", dw)
        object.__setattr__(self, "events", tuple(self.events))
        m = self.grid.steps
        if dw.ndim != 3 or dw.shape[1] != m:
            raise ConfigError("brownian increments must be [paths, steps, dims]")
        if not np.all(np.isfinite(dw)):
            raise NumericError("non-finite Brownian increments")
        clock = np.asarray(self.clock, dtype=float)
        object.__setattr__(self, "clock", clock)
        if clock.shape[-1] != m + 1:
            raise ConfigError("clock must hold one value per node")
        if np.any(np.abs(clock[..., 0]) > 0):
            raise ConfigError("clock must start at zero")
        if np.any(np.diff(clock, axis=-1) < -1e-12):
            raise ConfigError("clock must be non-decreasing per path")
        if len(self.events) != self.paths:
            raise ConfigError("one event record per path required")
        w = np.concatenate(
            [np.zeros((self.paths, 1, self.dims)), np.cumsum(dw, axis=1)], axis=1)
        object.__setattr__(self, "brownian", w)

    @property
    def paths(self) -> int:
        return self.brownian_increments.shape[0]

    @property
    def dims(self) -> int:
        return self.brownian_increments.shape[2]

    @property
    def clock_full(self) -> np.ndarray:
        """[J, m+1] clock, materialised if stored broadcast-thin."""
        return np.broadcast_to(self.clock, (self.paths, self.grid.steps + 1))

    @property
    def clock_increments(self) -> np.ndarray:
        return np.diff(self.clock, axis=-1)

    def total_counts(self) -> np.ndarray:
        return self.counts.sum(axis=2)

    def with_clock(self, clock: np.ndarray, kind: str | None = None) -> "PathBundle":
        """Same scenarios with a replacement clock (compensator masses kept)."""
        return PathBundle(grid=self.grid, marks=self.marks,
                          brownian_increments=self.brownian_increments,
                          events=self.events, clock=clock, counts=self.counts,
                          comp_mass=self.comp_mass, seed=self.seed,
                          kind=kind or self.kind, extra=dict(self.extra))

    def with_extra(self, **channels) -> "PathBundle":
        merged = dict(self.extra)
        merged.update(channels)
        return PathBundle(grid=self.grid, marks=self.marks,
                          brownian_increments=self.brownian_increments,
                          events=self.events, clock=self.clock, counts=self.counts,
                          comp_mass=self.comp_mass, seed=self.seed,
                          kind=self.kind, extra=merged)


def _rng(seed: int, path: int, channel: int) -> np.random.Generator:
    """Counter-based per-path stream so paths are order-independent."""
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=(int(seed) & (2**64 - 1), path, channel))))


def _trapezoid(fn: Callable[[float], float], a: float, b: float) -> float:
    return 0.5 * (b - a) * (fn(a) + fn(b))


def _interval_envelopes(total_rate: Callable[[float], float],
                        grid: TimeGrid, declared: float | None) -> np.ndarray:
    """Per-interval constant bound on the total jump rate."""
    if declared is not None:
        if not np.isfinite(declared) or declared < 0:
            raise ConfigError("intensity envelope must be finite and >= 0")
        return np.full(grid.steps, float(declared))
    env = np.empty(grid.steps)
    for i in range(grid.steps):
        ts = np.linspace(grid.nodes[i], grid.nodes[i + 1], _ENVELOPE_SAMPLES)
        values = np.array([total_rate(t) for t in ts])
        if not np.all(np.isfinite(values)):
            raise ConfigError("intensity is unbounded on the grid")
        env[i] = values.max() * _ENVELOPE_PAD
    return env


def _thin_events(spec: CompensatorSpec, marks: MarkSpace, grid: TimeGrid,
                 env: np.ndarray, rng: np.random.Generator):
    """Accept/reject (thinning) sampler for one path. Exact in law."""
    probs = marks.probs if marks.kind == FINITE else np.array([1.0])

    def per_mark(t):
        return spec.intensity(t) * probs

    nodes = grid.nodes
    mortality = spec.kind == POPULATION_MORTALITY
    alive = spec.population if mortality else 1
    times, indices = [], []
    i, t = 0, 0.0
    while i < grid.steps:
        lam_star = env[i] * (alive if mortality else 1)
        if lam_star <= 0:
            i += 1
            t = nodes[i]
            continue
        t_cand = t + rng.exponential(1.0 / lam_star)
        if t_cand >= nodes[i + 1]:
            i += 1
            t = nodes[i]
            continue
        t = t_cand
        rates = per_mark(t)
        lam_t = rates.sum() * (alive if mortality else 1)
        if rng.random() * lam_star <= lam_t:
            total = rates.sum()
            if marks.size == 1 or total <= 0:
                idx = 0
            else:
                idx = int(rng.choice(marks.size, p=rates / total))
            times.append(t)
            indices.append(idx)
            if mortality:
                alive -= 1
    return np.array(times), np.array(indices, dtype=np.int64)


def _clock_and_mass(spec: CompensatorSpec, marks: MarkSpace, grid: TimeGrid,
                    event_times: np.ndarray):
    """Clock values at nodes and per-interval per-mark compensator mass.

    For population mortality the survivor factor is piecewise constant
    between deaths, so the integral splits at event times; the deterministic
    rate itself is integrated by trapezoid on each segment.
    """
    probs = marks.probs if marks.kind == FINITE else np.array([1.0])
    n_marks = probs.size

    def rate_vec(t):
        return spec.intensity(t) * probs

    m = grid.steps
    mass = np.zeros((m, n_marks))
    if spec.kind != POPULATION_MORTALITY:
        for i in range(m):
            a, b = grid.nodes[i], grid.nodes[i + 1]
            mass[i] = 0.5 * (b - a) * (rate_vec(a) + rate_vec(b))
    else:
        n0 = spec.population
        for i in range(m):
            a, b = grid.nodes[i], grid.nodes[i + 1]
            cuts = event_times[(event_times > a) & (event_times <= b)]
            seg = np.concatenate([[a], cuts, [b]])
            for k in range(seg.size - 1):
                lo, hi = seg[k], seg[k + 1]
                if hi <= lo:
                    continue
                alive = n0 - int(np.searchsorted(event_times, lo, side="right"))
                if alive <= 0:
                    break
                mass[i] += alive * 0.5 * (hi - lo) * (rate_vec(lo) + rate_vec(hi))
    clock = np.concatenate([[0.0], np.cumsum(mass.sum(axis=1))])
    return clock, mass


def simulate_bundle(spec: CompensatorSpec, marks: MarkSpace, grid: TimeGrid,
                    paths: int, dims: int = 1, seed: int = 0) -> PathBundle:
    """Simulate joint Brownian/jump scenarios.

    Brownian increments are i.i.d. normal with variance equal to the step
    length per coordinate. Jump times come from thinning, marks from the
    normalised per-mark rates at the jump time. Deterministic given seed.
    """
    if paths < 1:
        raise ConfigError("need at least one path")
    if dims < 1:
        raise ConfigError("need at least one Brownian coordinate")
    if spec.kind == LOCAL_TIME_CLOCK:
        raise ConfigError("use simulate_local_time_clock for the local-time kind")
    if marks.kind == PROCESS and spec.gbm is None:
        raise ConfigError("process marker needs gbm=(drift, vol, spot)")

    probs = marks.probs if marks.kind == FINITE else np.array([1.0])

    def total_rate(t):
        return float((spec.intensity(t) * probs).sum())

    env = _interval_envelopes(total_rate, grid, spec.envelope)
    m, n_marks = grid.steps, probs.size
    deltas = grid.deltas

    dw = np.empty((paths, m, dims))
    counts = np.zeros((paths, m + 1, n_marks), dtype=float)
    events = []
    deterministic_clock = spec.kind != POPULATION_MORTALITY

    if deterministic_clock:
        clock_shared, mass_shared = _clock_and_mass(spec, marks, grid, np.array([]))
        clock = clock_shared[None, :]
        comp_mass = mass_shared[None, :, :]
    else:
        clock = np.zeros((paths, m + 1))
        comp_mass = np.zeros((paths, m, n_marks))

    carried = None
    if marks.kind == PROCESS:
        carried = np.empty((paths, m + 1))

    for j in range(paths):
        gen_w = _rng(seed, j, 0)
        dw[j] = gen_w.standard_normal((m, dims)) * np.sqrt(deltas)[:, None]
        gen_jump = _rng(seed, j, 1)
        times, idx = _thin_events(spec, marks, grid, env, gen_jump)

        if marks.kind == GAUSSIAN:
            values = gen_jump.standard_normal(times.size)
        elif marks.kind == PROCESS:
            alpha, vol, spot = spec.gbm
            logs = np.log(spot) + np.cumsum(
                (alpha - 0.5 * vol**2) * deltas + vol * dw[j, :, 0])
            s_nodes = np.concatenate([[spot], np.exp(logs)])
            carried[j] = s_nodes
            # marker is the carried process at the node entering the jump
            left = np.searchsorted(grid.nodes, times, side="right") - 1
            values = s_nodes[left]
        else:
            values = idx.astype(float)

        events.append(MppPath(times, idx, values))
        for i_mark in range(n_marks):
            cum = np.searchsorted(times[idx == i_mark], grid.nodes, side="right")
            counts[j, :, i_mark] = cum
        if not deterministic_clock:
            clock[j], comp_mass[j] = _clock_and_mass(spec, marks, grid, times)

    extra = {}
    if carried is not None:
        extra["carrier"] = carried
    return PathBundle(grid=grid, marks=marks, brownian_increments=dw,
                      events=tuple(events), clock=clock, counts=counts,
                      comp_mass=comp_mass, seed=seed, kind=spec.kind, extra=extra)


def simulate_local_time_clock(grid: TimeGrid, paths: int, seed: int = 0,
                              substeps: int = 100) -> PathBundle:
    """Single-jump process whose clock is Brownian local time at zero.

    Local time is accumulated on a sub-grid `substeps` times finer than the
    main grid via the discrete identity |B| minus its sign-integral, which
    makes the increments non-negative by construction (they vanish off the
    zero crossings). A unit-exponential threshold on the accumulated local
    time places the single jump; the clock is frozen there.
    """
    if paths < 1:
        raise ConfigError("need at least one path")
    if substeps < 1:
        raise ConfigError("substeps must be >= 1")
    marks = MarkSpace.single()
    m = grid.steps
    dw = np.empty((paths, m, 1))
    clock = np.zeros((paths, m + 1))
    local = np.zeros((paths, m + 1))
    crossing = np.zeros((paths, m + 1))
    counts = np.zeros((paths, m + 1, 1))
    comp_mass = np.zeros((paths, m, 1))
    events = []

    for j in range(paths):
        gen = _rng(seed, j, 3)
        threshold = gen.exponential(1.0)
        b_prev = 0.0
        l_prev = 0.0
        jump_time = None
        node_l = np.zeros(m + 1)
        node_a = np.zeros(m + 1)
        for i in range(m):
            dt_sub = (grid.nodes[i + 1] - grid.nodes[i]) / substeps
            db = gen.standard_normal(substeps) * np.sqrt(dt_sub)
            b = b_prev + np.cumsum(db)
            lefts = np.concatenate([[b_prev], b[:-1]])
            # |B| minus its sign-integral collapses to 2|B| at the zero
            # crossings and vanishes elsewhere; this exact form keeps the
            # accumulated local time non-decreasing by construction
            crossed = (lefts >= 0) != (b >= 0)
            incr = np.where(crossed, 2.0 * np.abs(b), 0.0)
            l_path = l_prev + np.cumsum(incr)
            if jump_time is None and l_path[-1] >= threshold:
                k = int(np.argmax(l_path >= threshold))
                jump_time = grid.nodes[i] + (k + 1) * dt_sub
            # clock freezes once local time crosses the exponential threshold
            node_a[i + 1] = min(l_path[-1], threshold)
            node_l[i + 1] = l_path[-1]
            crossing[j, i + 1] = float(crossed.mean())
            dw[j, i, 0] = b[-1] - b_prev
            b_prev = b[-1]
            l_prev = l_path[-1]
        clock[j] = np.maximum.accumulate(node_a)
        local[j] = node_l
        if jump_time is not None and jump_time <= grid.horizon:
            events.append(MppPath(np.array([jump_time]), np.array([0]),
                                  np.array([0.0])))
            counts[j, :, 0] = (grid.nodes >= jump_time).astype(float)
        else:
            events.append(MppPath(np.array([]), np.array([], dtype=np.int64),
                                  np.array([])))
        comp_mass[j, :, 0] = np.diff(clock[j])

    return PathBundle(grid=grid, marks=marks, brownian_increments=dw,
                      events=tuple(events), clock=clock, counts=counts,
                      comp_mass=comp_mass, seed=seed, kind=LOCAL_TIME_CLOCK,
                      extra={"local_time": local,
                             "crossing_fraction": crossing})


# ---------------------------------------------------------------------------
# integrals and norms


def _hermite_rule(order: int = 41):
    x, w = np.polynomial.hermite_e.hermegauss(order)
    return x, w / np.sqrt(2.0 * np.pi)


def compensated_integral(bundle: PathBundle,
                         integrand: Callable[[float, object], float]) -> np.ndarray:
    """Per-path jump sum minus discrete compensator sum.

    The integrand receives (t, mark) with mark being the label for finite
    spaces and the marker value otherwise. The compensator side evaluates
    the integrand at the left node of each interval against the interval's
    compensator mass (a Gauss-Hermite average over the marker for the
    gaussian kind).
    """
    grid = bundle.grid
    out = np.zeros(bundle.paths)
    for j, path in enumerate(bundle.events):
        if path.count:
            if bundle.marks.kind == FINITE:
                args = [bundle.marks.labels[k] for k in path.marks]
            else:
                args = path.mark_values
            out[j] = sum(integrand(t, a) for t, a in zip(path.times, args))

    mass = np.broadcast_to(
        bundle.comp_mass, (bundle.paths,) + bundle.comp_mass.shape[1:])
    if bundle.marks.kind == FINITE:
        for i in range(grid.steps):
            t = grid.nodes[i]
            for k, label in enumerate(bundle.marks.labels):
                out -= integrand(t, label) * mass[:, i, k]
    elif bundle.marks.kind == GAUSSIAN:
        xs, ws = _hermite_rule()
        for i in range(grid.steps):
            t = grid.nodes[i]
            avg = sum(w * integrand(t, x) for x, w in zip(xs, ws))
            out -= avg * mass[:, i, 0]
    else:  # process marker: evaluate at the carried value entering the interval
        carrier = bundle.extra["carrier"]
        for i in range(grid.steps):
            t = grid.nodes[i]
            vals = np.array([integrand(t, c) for c in carrier[:, i]])
            out -= vals * mass[:, i, 0]
    values = np.asarray(out)
    if not np.all(np.isfinite(values)):
        raise NumericError("non-finite compensated integral")
    return values


def weighted_norm(values: np.ndarray, bundle: PathBundle, beta: float,
                  measure: str = "dA", include_time: bool = False,
                  endpoint: str = "left") -> float:
    """Monte Carlo estimate of the squared exponential-weighted norm.

    measure "dA" integrates node values against clock increments, "dt"
    against step lengths, and "dp" integrates per-mark interval values
    against the compensator mass. The weight is exp(beta * A), or
    exp(beta * (A + t)) when include_time is set.
    """
    if beta < 0:
        raise ConfigError("beta must be >= 0")
    if endpoint not in ("left", "right"):
        raise ConfigError("endpoint must be 'left' or 'right'")
    grid = bundle.grid
    m = grid.steps
    clock = bundle.clock
    exponent = beta * (clock + grid.nodes) if include_time else beta * clock
    weights = np.exp(exponent)  # [J or 1, m+1]
    values = np.asarray(values, dtype=float)

    if measure == "dp":
        if bundle.marks.kind != FINITE:
            raise ConfigError("dp norm needs a finite mark space")
        if values.shape[-2:] != (m, bundle.marks.size):
            raise ConfigError("dp norm expects [paths, steps, marks] values")
        w = weights[..., :-1] if endpoint == "left" else weights[..., 1:]
        contrib = (values ** 2 * bundle.comp_mass).sum(axis=2) * w
        return float(contrib.sum(axis=1).mean())

    if values.shape[-1] != m + 1:
        raise ConfigError("node-measure norms expect one value per node")
    if values.ndim == 1:
        values = values[None, :]
    if measure == "dA":
        incr = bundle.clock_increments
    elif measure == "dt":
        incr = grid.deltas[None, :]
    else:
        raise ConfigError(f"unknown measure {measure!r}")
    if endpoint == "left":
        contrib = weights[..., :-1] * values[..., :-1] ** 2 * incr
    else:
        contrib = weights[..., 1:] * values[..., 1:] ** 2 * incr
    return float(contrib.sum(axis=-1).mean())


def exp_clock_time_integral(bundle: PathBundle, beta: float,
                            node_lo: int = 0, node_hi: int | None = None,
                            endpoint: str = "left") -> float:
    """Estimate of E of the integral of exp(beta (A+s)) d(A+s) over a node range."""
    grid = bundle.grid
    hi = grid.steps if node_hi is None else node_hi
    w = np.exp(beta * (bundle.clock + grid.nodes))  # [J or 1, m+1]
    incr = bundle.clock_increments + grid.deltas
    if endpoint == "left":
        contrib = w[..., node_lo:hi] * incr[..., node_lo:hi]
    else:
        contrib = w[..., node_lo + 1:hi + 1] * incr[..., node_lo:hi]
    return float(contrib.sum(axis=-1).mean())


def riemann_gap(bundle: PathBundle, beta: float) -> dict:
    """Left- vs right-endpoint estimates of the weight integral.

    The norms are Riemann sums; a wide gap between endpoint conventions
    signals the grid is too coarse for the chosen beta.
    """
    left = exp_clock_time_integral(bundle, beta, endpoint="left")
    right = exp_clock_time_integral(bundle, beta, endpoint="right")
    scale = max(abs(left), abs(right), 1e-300)
    gap = abs(right - left) / scale
    return {"left": left, "right": right, "relative_gap": gap,
            "flagged": bool(gap > 0.10)}


def check_assumptions(bundle: PathBundle, beta: float) -> dict:
    """Diagnostics for the standing integrability assumptions.

    Reports the largest node-to-node clock jump (continuity proxy), the
    sample mean of exp(beta * A_T), the weight integral, and finiteness
    flags. Purely informational; nothing raises here.
    """
    clock = bundle.clock_full
    max_jump = float(np.diff(clock, axis=1).max(initial=0.0))
    exp_terminal = float(np.exp(beta * clock[:, -1]).mean())
    weight_int = exp_clock_time_integral(bundle, beta)
    gap = riemann_gap(bundle, beta)
    return {
        "beta": beta,
        "max_clock_jump": max_jump,
        "exp_beta_clock_terminal": exp_terminal,
        "weight_integral": weight_int,
        "finite": bool(np.isfinite(exp_terminal) and np.isfinite(weight_int)),
        "riemann_gap": gap,
        "paths_adequate": bundle.paths >= MIN_PATHS_FOR_STATS,
    }


# ---------------------------------------------------------------------------
# persistence


def save_bundle(bundle: PathBundle, prefix: str) -> dict:
    """Write header JSON plus node and event CSV files.

    Node rows: path, node, t, A, d Brownian values, per-mark counts.
    Event rows: path, time, mark index, marker value. Full round-trip
    float precision.
    """
    header = {
        "format": "mrbsde-bundle-v1",
        "seed": bundle.seed,
        "kind": bundle.kind,
        "paths": bundle.paths,
        "dims": bundle.dims,
        "grid": [repr(float(t)) for t in bundle.grid.nodes],
        "marks": {"labels": list(bundle.marks.labels),
                  "probs": [repr(float(p)) for p in bundle.marks.probs],
                  "kind": bundle.marks.kind},
        "columns": (["path", "node", "t", "A"]
                    + [f"W{k}" for k in range(bundle.dims)]
                    + [f"N[{lbl}]" for lbl in bundle.marks.labels]
                    + [f"mass[{lbl}]" for lbl in bundle.marks.labels]),
        "mass_paths": int(bundle.comp_mass.shape[0]),
        "clock_paths": int(bundle.clock.shape[0]),
        "extra_channels": sorted(bundle.extra),
    }
    paths = {
        "header": f"{prefix}_header.json",
        "nodes": f"{prefix}_nodes.csv",
        "events": f"{prefix}_events.csv",
    }
    with open(paths["header"], "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)

    clock = bundle.clock_full
    m = bundle.grid.steps
    mass = np.broadcast_to(bundle.comp_mass,
                           (bundle.paths, m, bundle.marks.size))
    with open(paths["nodes"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header["columns"] + header["extra_channels"])
        for j in range(bundle.paths):
            for i, t in enumerate(bundle.grid.nodes):
                row = [j, i, repr(float(t)), repr(float(clock[j, i]))]
                row += [repr(float(v)) for v in bundle.brownian[j, i]]
                row += [repr(float(c)) for c in bundle.counts[j, i]]
                # mass row i describes the interval starting at node i
                row += [repr(float(mass[j, i, k])) if i < m else repr(0.0)
                        for k in range(bundle.marks.size)]
                row += [repr(float(bundle.extra[k][j, i]))
                        for k in header["extra_channels"]]
                writer.writerow(row)

    with open(paths["events"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "time", "mark", "value"])
        for j, path in enumerate(bundle.events):
            for t, k, v in zip(path.times, path.marks, path.mark_values):
                writer.writerow([j, repr(float(t)), int(k), repr(float(v))])
    return paths


def load_bundle(prefix: str) -> PathBundle:
    """Rebuild a bundle written by save_bundle, bit-exact."""
    with open(f"{prefix}_header.json") as fh:
        header = json.load(fh)
    if header.get("format") != "mrbsde-bundle-v1":
        raise ConfigError("unrecognised bundle header")
    grid = TimeGrid(np.array([float(x) for x in header["grid"]]))
    marks = MarkSpace(tuple(header["marks"]["labels"]),
                      np.array([float(p) for p in header["marks"]["probs"]]),
                      kind=header["marks"]["kind"])
    paths, dims = header["paths"], header["dims"]
    m = grid.steps
    w = np.zeros((paths, m + 1, dims))
    clock = np.zeros((paths, m + 1))
    counts = np.zeros((paths, m + 1, marks.size))
    mass = np.zeros((paths, m, marks.size))
    extra = {k: np.zeros((paths, m + 1)) for k in header["extra_channels"]}
    with open(f"{prefix}_nodes.csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            j, i = int(row[0]), int(row[1])
            clock[j, i] = float(row[3])
            base = 4
            w[j, i] = [float(x) for x in row[base:base + dims]]
            base += dims
            counts[j, i] = [float(x) for x in row[base:base + marks.size]]
            base += marks.size
            if i < m:
                mass[j, i] = [float(x) for x in row[base:base + marks.size]]
            base += marks.size
            for k, name in enumerate(header["extra_channels"]):
                extra[name][j, i] = float(row[base + k])
    ev_times = [[] for _ in range(paths)]
    ev_marks = [[] for _ in range(paths)]
    ev_vals = [[] for _ in range(paths)]
    with open(f"{prefix}_events.csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            j = int(row[0])
            ev_times[j].append(float(row[1]))
            ev_marks[j].append(int(row[2]))
            ev_vals[j].append(float(row[3]))
    events = tuple(MppPath(np.array(ts), np.array(ks, dtype=np.int64), np.array(vs))
                   for ts, ks, vs in zip(ev_times, ev_marks, ev_vals))
    # restore broadcast-thin storage when the source was deterministic
    if header.get("clock_paths", paths) == 1:
        clock = clock[:1]
    if header.get("mass_paths", paths) == 1:
        mass = mass[:1]
    return PathBundle(grid=grid, marks=marks,
                      brownian_increments=np.diff(w, axis=1),
                      events=events, clock=clock, counts=counts,
                      comp_mass=mass, seed=header["seed"],
                      kind=header["kind"], extra=extra)

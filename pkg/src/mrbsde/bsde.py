"""Backward solvers on a path bundle.

Driver-known backward pass via global least-squares regression per node,
Picard iteration for Lipschitz generators, exponential-weight distances,
and the contraction planner that chooses the sub-interval split and the
iteration norm weights.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import AssumptionError, ConfigError, ConvergenceError, NumericError
from .scenario import FINITE, PathBundle, exp_clock_time_integral

RIDGE_FALLBACK = 1e-8  # trace-scaled weight used on rank-deficient designs
_MASS_FLOOR_REL = 1e-12


# ---------------------------------------------------------------------------
# regression basis


@dataclass(frozen=True)
class NodeState:
    """Per-path state visible at a grid node."""

    t: float
    index: int
    w: np.ndarray           # [J, d] Brownian values
    counts: np.ndarray      # [J, E] per-mark counts
    clock: np.ndarray       # [J]
    extra: dict             # named [J] channels

    @property
    def counts_total(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def node_state(bundle: PathBundle, i: int) -> NodeState:
    clock = bundle.clock_full
    return NodeState(
        t=float(bundle.grid.nodes[i]), index=i,
        w=bundle.brownian[:, i, :], counts=bundle.counts[:, i, :],
        clock=clock[:, i],
        extra={k: v[:, i] for k, v in bundle.extra.items()})


@dataclass(frozen=True)
class RegressionBasisSpec:
    """Named state features for the conditional-expectation regressions.

    Built-ins: "const", "w", "w^2", "w^3", "n" (per mark), "n_total";
    any extra channel name carried by the bundle, optionally with a "^k"
    power suffix. The constant feature is mandatory.
    """

    features: tuple = ("const", "w")
    ridge: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if "const" not in self.features:
            raise ConfigError("basis must include the constant feature")
        if self.ridge < 0:
            raise ConfigError("ridge weight must be >= 0")

    def design(self, state: NodeState) -> np.ndarray:
        cols = []
        for name in self.features:
            base, _, power = name.partition("^")
            k = int(power) if power else 1
            if base == "const":
                cols.append(np.ones((state.w.shape[0], 1)))
            elif base == "w":
                cols.append(state.w ** k)
            elif base == "n":
                cols.append(state.counts ** k)
            elif base == "n_total":
                cols.append(state.counts_total[:, None] ** k)
            elif base in state.extra:
                cols.append(state.extra[base][:, None] ** k)
            else:
                raise ConfigError(f"unknown basis feature {name!r}")
        return np.column_stack(cols)


def _fit(design: np.ndarray, targets: np.ndarray, ridge: float) -> np.ndarray:
    """Least-squares fitted values; ridge fallback on rank deficiency.

    targets may be [J] or [J, q]; returns fitted values of the same shape.
    Minimal-norm coefficients break ties when the design is singular.
    """
    j, p = design.shape
    if j >= 10 and 10 * p > j:
        raise ConfigError(f"basis too rich: {p} features for {j} paths")
    t2 = targets if targets.ndim == 2 else targets[:, None]
    if ridge > 0:
        gram = design.T @ design
        gram = gram + ridge * np.eye(p)
        coef = np.linalg.solve(gram, design.T @ t2)
    else:
        coef, _, rank, _ = np.linalg.lstsq(design, t2, rcond=None)
        if rank < p:
            gram = design.T @ design
            w = RIDGE_FALLBACK * np.trace(gram) / p
            coef = np.linalg.solve(gram + w * np.eye(p), design.T @ t2)
    fitted = design @ coef
    return fitted if targets.ndim == 2 else fitted[:, 0]


def _fit_ratio(design: np.ndarray, numerator: np.ndarray,
               weights: np.ndarray, ridge: float) -> np.ndarray:
    """Fitted conditional ratio E[numerator | x] / weight(x).

    Generalised least squares with the (node-measurable) weights: solving
    (X' diag(w) X) b = X' numerator projects the per-path ratio exactly,
    without dividing fitted values by small weights, which would amplify
    coefficient noise wherever the weight is small.
    """
    j, p = design.shape
    gram = design.T @ (design * weights[:, None])
    rhs = design.T @ numerator
    pad = max(ridge, RIDGE_FALLBACK * max(np.trace(gram), 1.0) / p)
    try:
        coef = np.linalg.solve(gram + pad * np.eye(p), rhs)
    except np.linalg.LinAlgError:
        coef = np.linalg.lstsq(gram + pad * np.eye(p), rhs, rcond=None)[0]
    return design @ coef


# ---------------------------------------------------------------------------
# generator and solutions


@dataclass(frozen=True)
class GeneratorSpec:
    """Driver pair plus Lipschitz data and terminal payoff.

    f(t, y, u, phi, state) integrates against the clock; u is [J, E] and
    phi the normalised mark weights. g(t, y, z, u, state) integrates
    against dt; it may ignore u, except when jump terms are folded into
    the dt integral (the insurance desk does this with a deterministic
    clock). `state` is the NodeState at the interval's left endpoint, the
    predictable information drivers may read; t and y are right-endpoint
    per the explicit scheme.

    lipschitz = (lf, lp, lg, lw): sensitivities of f in (y, u) and of g in
    (y, z) -- with lp also bounding a u-dependence of g when folded.
    """

    f: Callable | None = None
    g: Callable | None = None
    terminal: Callable[[NodeState], np.ndarray] | None = None
    lipschitz: tuple = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        lf, lp, lg, lw = (float(x) for x in self.lipschitz)
        if min(lf, lp, lg, lw) < 0:
            raise ConfigError("Lipschitz constants must be >= 0")
        object.__setattr__(self, "lipschitz", (lf, lp, lg, lw))

    @property
    def is_constant(self) -> bool:
        return all(c == 0.0 for c in self.lipschitz)

    def terminal_values(self, bundle: PathBundle) -> np.ndarray:
        state = node_state(bundle, bundle.grid.steps)
        xi = np.asarray(self.terminal(state), dtype=float)
        if xi.shape != (bundle.paths,):
            raise ConfigError("terminal payoff must produce one value per path")
        if not np.all(np.isfinite(xi)):
            raise NumericError("terminal payoff is not finite")
        return xi

    def validate(self, bundle: PathBundle, beta: float, seed: int = 0,
                 trials: int = 16) -> dict:
        """Spot-check the declared Lipschitz constants on random
        perturbations and estimate the weighted terminal integrability."""
        rng = np.random.default_rng(seed)
        j = bundle.paths
        n_marks = bundle.marks.size
        t = bundle.grid.horizon / 2
        state = node_state(bundle, 0)
        phi = np.full((j, n_marks), 1.0 / n_marks)
        lf, lp, lg, lw = self.lipschitz
        slack = 1e-7
        for _ in range(trials):
            y = rng.standard_normal(j)
            u = rng.standard_normal((j, n_marks))
            z = rng.standard_normal((j, bundle.dims))
            dy = rng.standard_normal(j) * 0.1
            du = rng.standard_normal((j, n_marks)) * 0.1
            dz = rng.standard_normal((j, bundle.dims)) * 0.1
            if self.f is not None:
                gap = np.abs(self.f(t, y + dy, u + du, phi, state)
                             - self.f(t, y, u, phi, state))
                bound = lf * np.abs(dy) + lp * np.sqrt((du ** 2 * phi).sum(axis=1))
                if np.any(gap > bound + slack):
                    raise AssumptionError("f violates its declared Lipschitz bound")
            if self.g is not None:
                gap = np.abs(self.g(t, y + dy, z + dz, u + du, state)
                             - self.g(t, y, z, u, state))
                bound = (lg * np.abs(dy) + lw * np.linalg.norm(dz, axis=1)
                         + lp * np.sqrt((du ** 2 * phi).sum(axis=1)))
                if np.any(gap > bound + slack):
                    raise AssumptionError("g violates its declared Lipschitz bound")
        xi = self.terminal_values(bundle)
        clock_t = bundle.clock_full[:, -1]
        weighted = float(np.mean(np.exp(beta * clock_t) * xi ** 2))
        if not np.isfinite(weighted):
            raise AssumptionError("weighted terminal second moment is not finite")
        return {"terminal_weighted_moment": weighted}


@dataclass
class BackwardSolution:
    """Per-path solution arrays on a node range [lo, hi] of the grid.

    y has one column per node; z and u one per interval. u columns are
    indexed by the interval's left node.
    """

    bundle: PathBundle
    node_lo: int
    node_hi: int
    y: np.ndarray            # [J, r+1]
    z: np.ndarray            # [J, r, d]
    u: np.ndarray            # [J, r, E]
    meta: dict = field(default_factory=dict)

    @property
    def nodes(self) -> np.ndarray:
        return self.bundle.grid.nodes[self.node_lo:self.node_hi + 1]

    def validate(self):
        for arr in (self.y, self.z, self.u):
            if not np.all(np.isfinite(arr)):
                raise NumericError("solution contains non-finite entries")


def _normalized_phi(bundle: PathBundle) -> np.ndarray:
    """Per-interval mark weights [J or 1, m, E]; zero rows stay zero."""
    mass = bundle.comp_mass
    total = mass.sum(axis=2, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        phi = np.where(total > 0, mass / np.where(total > 0, total, 1.0), 0.0)
    return phi


def solve_driver_known(f_drivers: np.ndarray, g_drivers: np.ndarray,
                       xi: np.ndarray, bundle: PathBundle,
                       basis: RegressionBasisSpec,
                       node_lo: int = 0, node_hi: int | None = None
                       ) -> BackwardSolution:
    """Backward pass with frozen drivers.

    Driver arrays are indexed by interval (column i multiplies the clock /
    time increment over (t_i, t_{i+1}], evaluated at the right endpoint per
    the explicit scheme). y at a node is the regression estimate of the
    next value plus driver increments; z projects onto Brownian increments
    and u onto compensated per-mark jump counts. Both projections regress
    the regression residual (target minus fitted y) rather than the raw
    target: the fitted y is node-measurable so the conditional expectation
    is unchanged, while the estimator noise scales with the one-step
    innovation instead of the value level. Intervals with zero compensator
    mass carry u = 0.
    """
    grid = bundle.grid
    hi = grid.steps if node_hi is None else node_hi
    if not 0 <= node_lo < hi <= grid.steps:
        raise ConfigError("invalid node range")
    r = hi - node_lo
    j = bundle.paths
    d = bundle.dims
    n_marks = bundle.marks.size
    if bundle.marks.kind != FINITE:
        raise ConfigError("backward solver requires a finite mark space")

    xi = np.asarray(xi, dtype=float)
    if xi.shape != (j,):
        raise ConfigError("terminal values must be one per path")
    if not (np.all(np.isfinite(f_drivers)) and np.all(np.isfinite(g_drivers))):
        raise NumericError("drivers must be finite")

    deltas = grid.deltas
    d_clock = np.broadcast_to(bundle.clock_increments, (j, grid.steps))
    mass = np.broadcast_to(bundle.comp_mass, (j, grid.steps, n_marks))
    d_counts = np.diff(bundle.counts, axis=1)

    y = np.empty((j, r + 1))
    z = np.zeros((j, r, d))
    u = np.zeros((j, r, n_marks))
    y[:, r] = xi

    mass_floor = _MASS_FLOOR_REL * max(float(mass.max(initial=0.0)), 1.0)

    for i in range(hi - 1, node_lo - 1, -1):
        col = i - node_lo
        state = node_state(bundle, i)
        design = basis.design(state)
        target = (y[:, col + 1]
                  + f_drivers[:, col] * d_clock[:, i]
                  + g_drivers[:, col] * deltas[i])
        y[:, col] = _fit(design, target, basis.ridge)
        innovation = target - y[:, col]
        dw = bundle.brownian_increments[:, i, :]
        dq = d_counts[:, i, :] - mass[:, i, :]
        z_fit = _fit(design, innovation[:, None] * dw, basis.ridge)
        z[:, col, :] = z_fit / deltas[i]
        for e in range(n_marks):
            weights = mass[:, i, e]
            if weights.max(initial=0.0) <= mass_floor:
                continue  # no compensator mass: no information, u stays 0
            ratio = _fit_ratio(design, innovation * dq[:, e], weights,
                               basis.ridge)
            u[:, col, e] = np.where(weights > mass_floor, ratio, 0.0)

    sol = BackwardSolution(bundle=bundle, node_lo=node_lo, node_hi=hi,
                           y=y, z=z, u=u,
                           meta={"basis": list(basis.features),
                                 "ridge": basis.ridge})
    sol.validate()
    return sol


def zero_solution(bundle: PathBundle, node_lo: int, node_hi: int
                   ) -> BackwardSolution:
    j, d, e = bundle.paths, bundle.dims, bundle.marks.size
    r = node_hi - node_lo
    return BackwardSolution(bundle=bundle, node_lo=node_lo, node_hi=node_hi,
                            y=np.zeros((j, r + 1)), z=np.zeros((j, r, d)),
                            u=np.zeros((j, r, e)))


def evaluate_drivers(gen: GeneratorSpec, sol: BackwardSolution) -> tuple:
    """Frozen driver arrays (per interval) from a previous iterate.

    The explicit scheme evaluates drivers at the interval's right-endpoint
    y together with the interval's z and u; the NodeState handed to the
    drivers is the left endpoint's (predictable information).
    """
    bundle = sol.bundle
    j = bundle.paths
    r = sol.node_hi - sol.node_lo
    phi = np.broadcast_to(_normalized_phi(bundle),
                          (j, bundle.grid.steps, bundle.marks.size))
    f_vals = np.zeros((j, r))
    g_vals = np.zeros((j, r))
    for col in range(r):
        i = sol.node_lo + col
        state = node_state(bundle, i)
        t_right = float(bundle.grid.nodes[i + 1])
        y_right = sol.y[:, col + 1]
        u_col = sol.u[:, col, :]
        z_col = sol.z[:, col, :]
        if gen.f is not None:
            f_vals[:, col] = gen.f(t_right, y_right, u_col, phi[:, i, :], state)
        if gen.g is not None:
            g_vals[:, col] = gen.g(t_right, y_right, z_col, u_col, state)
    return f_vals, g_vals


def weighted_distance(a: BackwardSolution, b: BackwardSolution, beta: float,
                      alpha: float, lf: float, lg: float,
                      node_lo: int | None = None, node_hi: int | None = None
                      ) -> float:
    """Squared iteration norm of the componentwise difference.

    Combines clock- and time-integrated y-differences (weighted by the
    f/g Lipschitz constants over sqrt(alpha)) with the jump and Brownian
    component norms, all under the exp(beta (A+s)) weight, restricted to
    the given node range.
    """
    if a.bundle is not b.bundle:
        raise ConfigError("solutions must share one bundle")
    if (a.node_lo, a.node_hi) != (b.node_lo, b.node_hi):
        raise ConfigError("solutions must share a node range")
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    bundle = a.bundle
    grid = bundle.grid
    lo = a.node_lo if node_lo is None else node_lo
    hi = a.node_hi if node_hi is None else node_hi
    if not a.node_lo <= lo < hi <= a.node_hi:
        raise ConfigError("node range outside the solutions' range")
    j = bundle.paths
    sl = slice(lo - a.node_lo, hi - a.node_lo)

    clock = bundle.clock_full
    w_nodes = np.exp(beta * (clock + grid.nodes))[:, lo:hi]
    d_clock = np.broadcast_to(bundle.clock_increments, (j, grid.steps))[:, lo:hi]
    deltas = grid.deltas[lo:hi]

    dy = (a.y - b.y)[:, sl]
    dz = (a.z - b.z)[:, sl, :]
    du = (a.u - b.u)[:, sl, :]
    mass = np.broadcast_to(bundle.comp_mass,
                           (j, grid.steps, bundle.marks.size))[:, lo:hi, :]

    y_clock = float((w_nodes * dy ** 2 * d_clock).sum(axis=1).mean())
    y_time = float((w_nodes * dy ** 2 * deltas).sum(axis=1).mean())
    z_norm = float((w_nodes * (dz ** 2).sum(axis=2) * deltas).sum(axis=1).mean())
    u_norm = float((w_nodes * (du ** 2 * mass).sum(axis=2)).sum(axis=1).mean())
    root = np.sqrt(alpha)
    return lf / root * y_clock + u_norm + lg / root * y_time + z_norm


def solve_lipschitz(gen: GeneratorSpec, bundle: PathBundle,
                    basis: RegressionBasisSpec, tol: float = 1e-9,
                    max_iters: int = 50, beta: float | None = None,
                    alpha: float = 1.0, xi: np.ndarray | None = None,
                    node_lo: int = 0, node_hi: int | None = None
                    ) -> BackwardSolution:
    """Picard iteration for a Lipschitz generator without reflection.

    Drivers are frozen at the previous iterate on the same bundle (common
    random numbers), so the discrete map is deterministic. Stops when the
    squared iteration norm of the update falls below tol. Constant
    generators solve in a single pass.
    """
    lf, lp, lg, lw = gen.lipschitz
    if beta is None:
        beta = max(1.0, 1.01 * (lp ** 2 + 2 * lf))
    hi = bundle.grid.steps if node_hi is None else node_hi
    if xi is None:
        xi = gen.terminal_values(bundle)

    current = zero_solution(bundle, node_lo, hi)
    f_vals, g_vals = evaluate_drivers(gen, current)
    current = solve_driver_known(f_vals, g_vals, xi, bundle, basis,
                                 node_lo, hi)
    if gen.is_constant:
        current.meta["iterations"] = 1
        current.meta["ratios"] = []
        return current

    distances = []
    previous = current
    for it in range(2, max_iters + 1):
        f_vals, g_vals = evaluate_drivers(gen, previous)
        current = solve_driver_known(f_vals, g_vals, xi, bundle, basis,
                                     node_lo, hi)
        dist = weighted_distance(current, previous, beta, alpha, lf, lg)
        distances.append(dist)
        if dist < tol:
            ratios = [distances[k] / distances[k - 1]
                      for k in range(1, len(distances)) if distances[k - 1] > 0]
            current.meta["iterations"] = it
            current.meta["ratios"] = ratios
            return current
        previous = current
    ratios = [distances[k] / distances[k - 1]
              for k in range(1, len(distances)) if distances[k - 1] > 0]
    raise ConvergenceError(
        f"Picard iteration did not reach tol={tol} in {max_iters} iterations "
        f"(last distance {distances[-1]:.3e})", ratios=ratios)


# ---------------------------------------------------------------------------
# contraction planning


@dataclass
class ContractionPlan:
    """Sub-interval split with per-interval iteration-norm weights."""

    beta: float
    kappa: float
    h: float
    n_intervals: int
    boundaries: np.ndarray       # node indices, length n_intervals + 1
    alphas: np.ndarray           # per interval
    weight_integrals: np.ndarray  # estimated per interval
    threshold: float
    lf: float
    lg: float
    measured_ratios: list = field(default_factory=list)

    def interval_nodes(self, k: int) -> tuple:
        return int(self.boundaries[k]), int(self.boundaries[k + 1])


def contraction_threshold(kappa: float, lipschitz: tuple) -> float:
    """Minimal weight exponent for the fixed-point argument."""
    lf, lp, lg, lw = lipschitz
    return 256.0 * kappa ** 4 * (3.0 * (lf + lg) + 2.0 * (lp ** 2 + lw ** 2))


def _alpha_inequality(beta: float, alpha: float, lipschitz: tuple) -> bool:
    lf, lp, lg, lw = lipschitz
    root = np.sqrt(alpha)
    return beta > (2 * lp ** 2 / alpha + 3 * lf / root
                   + 2 * lw ** 2 / alpha + 3 * lg / root)


def plan_contraction(gen: GeneratorSpec, kappa: float, beta: float,
                     bundle: PathBundle) -> ContractionPlan:
    """Choose the largest feasible sub-interval length and the norm weights.

    Feasibility of a split requires, on every sub-interval, the weight
    exponent to clear the threshold inflated by the squared bracket built
    from the estimated exponential weight integral. The split is grid
    aligned; interval counts run from 1 up to the number of grid steps.
    """
    if kappa < 1.0:
        raise ConfigError("kappa must be >= 1")
    lip = gen.lipschitz
    lf, lp, lg, lw = lip
    thr = contraction_threshold(kappa, lip)
    if beta <= thr:
        raise AssumptionError(
            f"beta={beta} is not above the contraction threshold {thr}; "
            f"choose beta > {thr}")
    grid = bundle.grid
    m = grid.steps
    horizon = grid.horizon
    factor = 256.0 * kappa ** 4

    for n in range(1, m + 1):
        # sub-interval boundaries must sit on grid nodes
        targets = horizon * np.arange(n + 1) / n
        idx = np.array([int(np.argmin(np.abs(grid.nodes - t))) for t in targets])
        if np.any(np.abs(grid.nodes[idx] - targets) > 1e-9 * max(horizon, 1.0)):
            continue
        if np.any(np.diff(idx) < 1):
            continue
        integrals = np.array([
            exp_clock_time_integral(bundle, beta, int(idx[k]), int(idx[k + 1]))
            for k in range(n)])
        brackets = ((lf + lg) * integrals + 1.0) ** 2
        if np.all(beta > thr * brackets):
            alphas = 1.0 / (factor * brackets)
            for a in alphas:
                if not _alpha_inequality(beta, float(a), lip):
                    raise AssumptionError(
                        "internal inconsistency: alpha inequality failed on a "
                        "feasible split")
            return ContractionPlan(beta=beta, kappa=kappa, h=horizon / n,
                                   n_intervals=n, boundaries=idx,
                                   alphas=alphas, weight_integrals=integrals,
                                   threshold=thr, lf=lf, lg=lg)
    raise AssumptionError(
        "no grid-aligned sub-interval split satisfies the contraction "
        "condition; refine the grid, raise beta, or shrink the horizon")


def apriori_diagnostic(sol: BackwardSolution, beta: float) -> dict:
    """Estimate of the weighted running-maximum second moment of y.

    Also compares the half-sample estimate with the full-sample one; a
    large ratio flags heavy tails (instability under path doubling).
    """
    bundle = sol.bundle
    clock = bundle.clock_full[:, sol.node_lo:sol.node_hi + 1]
    per_path = (np.exp(beta * clock) * sol.y ** 2).max(axis=1)
    value = float(per_path.mean())
    half = float(per_path[: max(1, per_path.size // 2)].mean())
    ratio = value / half if half > 0 else 1.0
    return {"value": value, "half_sample": half, "growth_ratio": ratio,
            "flagged": bool(ratio > 1.5 or ratio < 1 / 1.5)}


# ---------------------------------------------------------------------------
# persistence


def save_solution(sol: BackwardSolution, prefix: str) -> dict:
    """CSV of per-path node values plus JSON metadata."""
    bundle = sol.bundle
    d = bundle.dims
    labels = bundle.marks.labels
    paths = {"csv": f"{prefix}_solution.csv", "meta": f"{prefix}_solution.json"}
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "node", "t", "y"]
                        + [f"z{k}" for k in range(d)]
                        + [f"u[{lbl}]" for lbl in labels])
        r = sol.node_hi - sol.node_lo
        for j in range(bundle.paths):
            for col in range(r + 1):
                i = sol.node_lo + col
                row = [j, i, repr(float(bundle.grid.nodes[i])),
                       repr(float(sol.y[j, col]))]
                if col < r:
                    row += [repr(float(v)) for v in sol.z[j, col]]
                    row += [repr(float(v)) for v in sol.u[j, col]]
                else:
                    row += [repr(0.0)] * (d + len(labels))
                writer.writerow(row)
    meta = {k: v for k, v in sol.meta.items()}
    meta.update({"node_lo": sol.node_lo, "node_hi": sol.node_hi,
                 "paths": bundle.paths, "seed": bundle.seed})
    with open(paths["meta"], "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=float)
    return paths

"""Super-hedging desk for a life book under a shortfall constraint.

Market: bank account, one stock, and a survival bond paying one unit per
survivor at maturity. Liability: continuous per-survivor payments, lump
death benefits by cause, and a terminal survival benefit. The hedging
problem is solved under the physical measure with the market prices of
diffusion and insurance risk inside the generator; the constraint is an
Expected Shortfall benchmark enforced through the mean-reflection
machinery with a deterministic risk-premium schedule K.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .bsde import (
    GeneratorSpec,
    NodeState,
    RegressionBasisSpec,
    plan_contraction,
)
from .errors import ConfigError
from .mean_reflect import (
    FlatnessReport,
    ReflectedSolution,
    flatness_report,
    solve_mean_reflected,
)
from .reflection import RhoReflector, RiskMeasureSpec
from .scenario import (
    CompensatorSpec,
    MarkSpace,
    PathBundle,
    TimeGrid,
    simulate_bundle,
)

SIGMA_FLOOR_REL = 1e-6  # of the initial stock price scale


def _time_fn(x) -> Callable[[float], float]:
    if callable(x):
        return x
    return lambda t, _v=float(x): _v


@dataclass(frozen=True)
class MarketModel:
    """Bank account rate, stock drift/volatility and spot."""

    rate: object = 0.0
    drift: object = 0.0
    volatility: object = 0.2
    spot: float = 1.0

    def __post_init__(self):
        if self.spot <= 0:
            raise ConfigError("spot must be positive")
        object.__setattr__(self, "_r", _time_fn(self.rate))
        object.__setattr__(self, "_mu", _time_fn(self.drift))
        object.__setattr__(self, "_sigma", _time_fn(self.volatility))

    def r(self, t: float) -> float:
        return float(self._r(t))

    def mu(self, t: float) -> float:
        return float(self._mu(t))

    def sigma(self, t: float) -> float:
        s = float(self._sigma(t))
        floor = SIGMA_FLOOR_REL * self.spot
        if s < floor:
            raise ConfigError(f"volatility {s} below the floor {floor}")
        return s

    def theta(self, t: float) -> float:
        """Market price of diffusion risk."""
        return (self.mu(t) - self.r(t)) / self.sigma(t)


@dataclass(frozen=True)
class InsuranceContract:
    """Life book: survivor payments, death benefits, survival benefit.

    hazard(t) returns the per-cause rate array; each cause e strikes a
    survivor at rate hazard(t)[e] * cause probability. premium is the
    continuous payment rate per survivor, death_benefit(t, label) the
    lump paid per death, survival_benefit the per-survivor terminal
    payment (a number or a function of the terminal state).
    """

    insured: int
    causes: MarkSpace
    hazard: object = 0.0
    premium: object = 0.0
    death_benefit: object = 0.0
    survival_benefit: object = 1.0

    def __post_init__(self):
        if self.insured < 0:
            raise ConfigError("insured count must be >= 0")
        if self.causes.kind != "finite":
            raise ConfigError("causes must form a finite mark space")
        hz = self.hazard
        if callable(hz):
            fn = lambda t: np.atleast_1d(np.asarray(hz(t), dtype=float))
        else:
            arr = np.atleast_1d(np.asarray(hz, dtype=float))
            if arr.size == 1:
                arr = np.full(self.causes.size, float(arr[0]))
            fn = lambda t, _a=arr: _a
        probe = fn(0.0)
        if probe.shape != (self.causes.size,):
            raise ConfigError("hazard must produce one rate per cause")
        if np.any(probe < 0):
            raise ConfigError("hazard rates must be >= 0")
        object.__setattr__(self, "_hazard", fn)
        object.__setattr__(self, "_premium", _time_fn(self.premium))
        db = self.death_benefit
        if callable(db):
            object.__setattr__(self, "_benefit", db)
        else:
            object.__setattr__(self, "_benefit",
                               lambda t, e, _v=float(db): _v)

    def hazard_at(self, t: float) -> np.ndarray:
        return self._hazard(t)

    def premium_at(self, t: float) -> float:
        return float(self._premium(t))

    def benefit_at(self, t: float, label) -> float:
        return float(self._benefit(t, label))

    def mortality_rate(self, t: float) -> float:
        """Total per-survivor hazard: sum of cause rates times probabilities."""
        return float((self.hazard_at(t) * self.causes.probs).sum())

    def terminal_benefit(self, state: NodeState) -> np.ndarray:
        alive = state.extra["alive"]
        f = self.survival_benefit
        if callable(f):
            return alive * np.asarray(f(state), dtype=float)
        return alive * float(f)


@dataclass(frozen=True)
class PricingMeasure:
    """Risk loadings defining the pricing measure.

    loading(t, label) > -1 scales each cause's hazard under pricing; the
    diffusion risk price comes from the market model.
    """

    loading: object = 0.0

    def __post_init__(self):
        ld = self.loading
        if callable(ld):
            object.__setattr__(self, "_loading", ld)
        else:
            object.__setattr__(self, "_loading",
                               lambda t, e, _v=float(ld): _v)

    def kappa(self, t: float, label) -> float:
        v = float(self._loading(t, label))
        if v <= -1.0:
            raise ConfigError("risk loading must stay above -1")
        return v

    def kappa_vec(self, t: float, labels) -> np.ndarray:
        return np.array([self.kappa(t, lbl) for lbl in labels])


# ---------------------------------------------------------------------------
# bond


def loaded_mortality_rate(contract: InsuranceContract, measure: PricingMeasure,
                          t: float) -> float:
    """Per-survivor hazard under the pricing measure."""
    kap = measure.kappa_vec(t, contract.causes.labels)
    return float(((1.0 + kap) * contract.hazard_at(t) * contract.causes.probs).sum())


def bond_price(model: MarketModel, contract: InsuranceContract,
               measure: PricingMeasure, t: float, n_dead: int,
               horizon: float) -> float:
    """Survival-bond price: discounted expected survivors under pricing.

    Closed form: e^{-int r} * survivors * e^{-int loaded hazard}; zero
    once the book is exhausted.
    """
    if n_dead > contract.insured:
        raise ConfigError("dead count exceeds the insured count")
    alive = contract.insured - n_dead
    if alive == 0:
        return 0.0
    disc, _ = quad(model.r, t, horizon, limit=200)
    haz, _ = quad(lambda s: loaded_mortality_rate(contract, measure, s),
                  t, horizon, limit=200)
    return alive * np.exp(-disc - haz)


def bond_unit_curve(model: MarketModel, contract: InsuranceContract,
                    measure: PricingMeasure, grid: TimeGrid) -> np.ndarray:
    """Per-survivor bond price at each node."""
    return np.array([
        bond_price(model, contract, measure, float(t), contract.insured - 1,
                   grid.horizon)
        for t in grid.nodes])


# ---------------------------------------------------------------------------
# scenario generation


def simulate_insurance_bundle(model: MarketModel, contract: InsuranceContract,
                              grid: TimeGrid, paths: int, seed: int = 0
                              ) -> PathBundle:
    """Mortality scenarios with stock, survivor and cash-flow channels.

    Deaths follow the population hazard under the physical measure; the
    stock uses the exact log scheme on the bundle's own Brownian
    increments. The cash-flow channel accumulates survivor payments
    (trapezoid between deaths) plus realised death benefits.
    """
    spec = CompensatorSpec.mortality(contract.insured, contract.hazard_at)
    bundle = simulate_bundle(spec, contract.causes, grid, paths, dims=1,
                             seed=seed)
    m = grid.steps
    deltas = grid.deltas

    log_s = np.empty((paths, m + 1))
    log_s[:, 0] = np.log(model.spot)
    for i in range(m):
        t = float(grid.nodes[i])
        mu, sig = model.mu(t), model.sigma(t)
        log_s[:, i + 1] = (log_s[:, i] + (mu - 0.5 * sig ** 2) * deltas[i]
                           + sig * bundle.brownian_increments[:, i, 0])
    stock = np.exp(log_s)

    alive = contract.insured - bundle.total_counts()
    premium_flows = survivor_premium_flows(bundle, contract)
    benefit_flows = death_benefit_flows(bundle, contract)
    cash = np.concatenate(
        [np.zeros((paths, 1)), np.cumsum(premium_flows + benefit_flows, axis=1)],
        axis=1)
    return bundle.with_extra(stock=stock, log_stock=log_s,
                             alive=alive.astype(float), cashflow=cash)


def survivor_premium_flows(bundle: PathBundle,
                           contract: InsuranceContract) -> np.ndarray:
    """Per-interval integral of survivors * premium rate, [J, m]."""
    grid = bundle.grid
    m = grid.steps
    base = np.array([0.5 * float(grid.deltas[i])
                     * (contract.premium_at(float(grid.nodes[i]))
                        + contract.premium_at(float(grid.nodes[i + 1])))
                     for i in range(m)])
    flows = np.tile(contract.insured * base, (bundle.paths, 1))
    for j, path in enumerate(bundle.events):
        for t_ev in path.times:
            idx = int(np.searchsorted(grid.nodes, t_ev, side="left")) - 1
            idx = min(max(idx, 0), m - 1)
            # the dead stop paying from t_ev on
            partial = 0.5 * (float(grid.nodes[idx + 1]) - float(t_ev)) \
                * (contract.premium_at(float(t_ev))
                   + contract.premium_at(float(grid.nodes[idx + 1])))
            flows[j, idx] -= partial
            flows[j, idx + 1:] -= base[idx + 1:]
    return flows


def death_benefit_flows(bundle: PathBundle,
                        contract: InsuranceContract) -> np.ndarray:
    """Per-interval realised death benefits, [J, m]."""
    grid = bundle.grid
    m = grid.steps
    flows = np.zeros((bundle.paths, m))
    for j, path in enumerate(bundle.events):
        for t_ev, k_ev in zip(path.times, path.marks):
            idx = int(np.searchsorted(grid.nodes, t_ev, side="left")) - 1
            idx = min(max(idx, 0), m - 1)
            flows[j, idx] += contract.benefit_at(
                float(t_ev), contract.causes.labels[int(k_ev)])
    return flows


def hedging_view(bundle: PathBundle, contract: InsuranceContract) -> PathBundle:
    """Solver view of an insurance bundle: deterministic time clock.

    The clock becomes A_t = t and the per-interval compensator masses are
    rebuilt predictably as survivors(left) * hazard(left) * prob * dt, so
    the backward pass, the generator's jump terms and the wealth replay
    share one discretisation exactly.
    """
    grid = bundle.grid
    m = grid.steps
    clock = grid.nodes[None, :].copy()
    alive = bundle.extra["alive"]
    mass = np.empty((bundle.paths, m, contract.causes.size))
    for i in range(m):
        t = float(grid.nodes[i])
        rate = contract.hazard_at(t) * contract.causes.probs
        mass[:, i, :] = alive[:, i][:, None] * rate[None, :] * grid.deltas[i]
    out = bundle.with_clock(clock, kind="dt-clock")
    return PathBundle(grid=out.grid, marks=out.marks,
                      brownian_increments=out.brownian_increments,
                      events=out.events, clock=clock, counts=out.counts,
                      comp_mass=mass, seed=out.seed, kind="dt-clock",
                      extra=dict(out.extra))


# ---------------------------------------------------------------------------
# hedging problem assembly


def build_hedging_bsde(model: MarketModel, contract: InsuranceContract,
                       measure: PricingMeasure, grid: TimeGrid
                       ) -> GeneratorSpec:
    """Generator and terminal payoff of the hedging problem.

    The clock is deterministic time, so all terms ride in the dt driver:
    discounting, the diffusion risk premium, survivor payments, loaded
    death benefits, and the jump-component loading. Market and mortality
    coefficients enter at the interval's left endpoint (the predictable
    state handed to the driver); the iterate values are right-endpoint.
    """
    labels = contract.causes.labels
    probs = contract.causes.probs
    n = contract.insured

    nodes = grid.nodes
    sup_r = float(max(abs(model.r(float(t))) for t in nodes))
    sup_theta = float(max(abs(model.theta(float(t))) for t in nodes))
    sup_kappa = float(max(abs(measure.kappa(float(t), lbl))
                          for t in nodes for lbl in labels))
    sup_rate = float(max(contract.mortality_rate(float(t)) for t in nodes))
    if not np.isfinite(sup_r + sup_theta + sup_kappa + sup_rate):
        raise ConfigError("unbounded model coefficients on the grid")

    def g(t, y, z, u, state):
        s = state.t
        alive = state.extra["alive"]
        rate = contract.hazard_at(s) * probs
        kap = measure.kappa_vec(s, labels)
        ben = np.array([contract.benefit_at(s, lbl) for lbl in labels])
        jump_load = (rate * (ben * (1.0 + kap) + 0.0)).sum()
        u_load = (u * (rate * kap)[None, :]).sum(axis=1)
        return (-y * model.r(s) - model.theta(s) * z[:, 0]
                + contract.premium_at(s) * alive
                + alive * jump_load + alive * u_load)

    # u-sensitivity of g: survivors * sum_e |kappa| * hazard * prob, cast in
    # the dt-folded slot lp; y and z sensitivities are the rate and risk
    # price bounds.
    lp = n * sup_rate * sup_kappa
    gen = GeneratorSpec(
        f=None, g=g,
        terminal=contract.terminal_benefit,
        lipschitz=(0.0, lp, sup_r, sup_theta))
    return gen


@dataclass
class HedgePlan:
    """Extracted super-hedging strategy and its reports."""

    price: float
    pi: np.ndarray              # [J, m] stock allocation
    chi: np.ndarray             # [J, m] bond allocation
    k_premium: np.ndarray       # [m+1] deterministic risk-premium schedule
    bond_unit: np.ndarray       # [m+1] per-survivor bond price
    bond_mean: np.ndarray       # [m+1] average bond value across paths
    es_values: np.ndarray       # [m+1] empirical shortfall of Y per node
    benchmarks: np.ndarray      # [m+1]
    cause_dispersion: float     # identification consistency across causes
    solution: ReflectedSolution = None
    report: FlatnessReport = None

    @property
    def margins(self) -> np.ndarray:
        return self.benchmarks - self.es_values


def price_and_hedge(model: MarketModel, contract: InsuranceContract,
                    measure: PricingMeasure, rm: RiskMeasureSpec,
                    bundle: PathBundle, basis: RegressionBasisSpec,
                    beta: float, tol: float = 1e-9, max_iters: int = 15
                    ) -> HedgePlan:
    """Solve the constrained hedging problem and extract the strategy.

    Rejects terminal payoffs whose risk already exceeds the benchmark.
    The stock allocation is z over the left-node volatility; the bond
    allocation uses the hazard-weighted average of u plus the death
    benefit across causes (cause-independent in the exact model; the
    dispersion across causes is reported as a model-fit diagnostic).
    """
    if "alive" not in bundle.extra:
        raise ConfigError("bundle lacks insurance channels; use "
                          "simulate_insurance_bundle")
    grid = bundle.grid
    view = hedging_view(bundle, contract)
    gen = build_hedging_bsde(model, contract, measure, grid)
    reflector = RhoReflector(rm)

    xi = gen.terminal_values(view)
    horizon = grid.horizon
    rho_t = rm.rho(horizon, xi)
    c_t = rm.benchmark(horizon)
    if rho_t > c_t:
        raise ConfigError(
            f"terminal payoff rejected: risk {rho_t:.6g} exceeds the "
            f"terminal benchmark {c_t:.6g}")

    kappa_rho = max(reflector.lipschitz_constant(grid.nodes), 1.0)
    plan = plan_contraction(gen, kappa_rho, beta, view)
    sol = solve_mean_reflected(gen, reflector, view, basis, plan,
                               tol=tol, max_iters=max_iters)
    report = flatness_report(sol, reflector)

    m = grid.steps
    j = bundle.paths
    z = sol.backward.z[:, :, 0]
    u = sol.backward.u
    alive = bundle.extra["alive"]

    pi = np.empty((j, m))
    chi = np.empty((j, m))
    dispersion = 0.0
    for i in range(m):
        t = float(grid.nodes[i])
        sig = model.sigma(t)
        pi[:, i] = z[:, i] / sig
        rate = contract.hazard_at(t) * contract.causes.probs
        total = rate.sum()
        w = rate / total if total > 0 else np.full(rate.size, 1.0 / rate.size)
        ben = np.array([contract.benefit_at(t, lbl)
                        for lbl in contract.causes.labels])
        per_cause = u[:, i, :] + ben[None, :]
        avg = per_cause @ w
        chi[:, i] = -alive[:, i] * avg
        if rate.size > 1:
            dispersion = max(dispersion, float(
                np.abs(per_cause - avg[:, None]).max(initial=0.0)))

    unit = bond_unit_curve(model, contract, measure, grid)
    bond_mean = (alive * unit[None, :]).mean(axis=0)
    es = np.array([rm.rho(float(t), sol.backward.y[:, i])
                   for i, t in enumerate(grid.nodes)])
    bench = np.array([rm.benchmark(float(t)) for t in grid.nodes])

    price = float(sol.backward.y[:, 0].mean())
    return HedgePlan(price=price, pi=pi, chi=chi,
                     k_premium=sol.compensator, bond_unit=unit,
                     bond_mean=bond_mean, es_values=es, benchmarks=bench,
                     cause_dispersion=dispersion, solution=sol, report=report)


def replay_wealth(hedge: HedgePlan, model: MarketModel,
                  contract: InsuranceContract, measure: PricingMeasure,
                  bundle: PathBundle) -> np.ndarray:
    """Forward wealth with the extracted strategy on the same paths.

    Uses left-endpoint coefficients matching the generator's predictable
    convention; survivor payments are charged per step and death benefits
    at realised deaths. Returns the wealth at every node.
    """
    grid = bundle.grid
    m = grid.steps
    j = bundle.paths
    alive = bundle.extra["alive"]
    d_counts = np.diff(bundle.total_counts(), axis=1)
    benefits = death_benefit_flows(bundle, contract)
    x = np.empty((j, m + 1))
    x[:, 0] = hedge.price
    dk = np.diff(hedge.k_premium)

    for i in range(m):
        t = float(grid.nodes[i])
        dt = float(grid.deltas[i])
        r, mu, sig = model.r(t), model.mu(t), model.sigma(t)
        kap = measure.kappa_vec(t, contract.causes.labels)
        rate = contract.hazard_at(t) * contract.causes.probs
        loaded = float(((1.0 + kap) * rate).sum())
        a_i = alive[:, i]
        live = a_i > 0
        pi_i = hedge.pi[:, i]
        chi_i = np.where(live, hedge.chi[:, i], 0.0)

        drift = (r * x[:, i] + pi_i * (mu - r)
                 + chi_i * loaded - a_i * contract.premium_at(t))
        jumps = np.where(live, chi_i / np.where(live, a_i, 1.0), 0.0) \
            * d_counts[:, i]
        x[:, i + 1] = (x[:, i] + drift * dt
                       + pi_i * sig * bundle.brownian_increments[:, i, 0]
                       - jumps - benefits[:, i] - dk[i])
    return x

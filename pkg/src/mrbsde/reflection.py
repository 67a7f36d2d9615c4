"""Mean-constraint reflection operators.

Implements the running-loss shift operator (smallest non-negative shift
making the sample-mean loss acceptable), the exact empirical Expected
Shortfall, and benchmark reflections for translation-invariant risk
measures.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .errors import AssumptionError, ConfigError, NumericError

_MAX_DOUBLINGS = 64


@dataclass(frozen=True)
class EmpiricalSample:
    """Cross-sectional sample of a node-measurable quantity."""

    values: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.size < 1:
            raise ConfigError("empirical sample must be non-empty")
        if not np.all(np.isfinite(values)):
            raise NumericError("empirical sample contains non-finite entries")


def _values(sample) -> np.ndarray:
    if isinstance(sample, EmpiricalSample):
        return sample.values
    return np.asarray(sample, dtype=float)


@dataclass(frozen=True)
class LossSpec:
    """Running loss with two-sided Lipschitz bounds.

    loss(t, y) must be strictly increasing in y with slope between
    kappa_lower and kappa_upper, and grow at most linearly.
    """

    loss: Callable[[float, np.ndarray], np.ndarray]
    kappa_lower: float
    kappa_upper: float
    growth: float = 0.0

    def __post_init__(self):
        if self.kappa_lower <= 0:
            raise ConfigError("kappa_lower must be positive")
        if self.kappa_upper < self.kappa_lower:
            raise ConfigError("kappa_upper must dominate kappa_lower")
        if self.growth < 0:
            raise ConfigError("growth constant must be >= 0")

    def validate(self, times=(0.0, 0.5, 1.0), span=5.0, pairs=64, seed=0) -> None:
        """Spot-check monotonicity, the slope bounds and linear growth
        on random sample pairs; raises AssumptionError on violation."""
        rng = np.random.default_rng(seed)
        slack = 1e-9
        for t in times:
            y1 = rng.uniform(-span, span, pairs)
            y2 = y1 + rng.uniform(1e-4, span, pairs)
            l1 = np.asarray(self.loss(t, y1), dtype=float)
            l2 = np.asarray(self.loss(t, y2), dtype=float)
            if not (np.all(np.isfinite(l1)) and np.all(np.isfinite(l2))):
                raise NumericError("loss produced non-finite values")
            gap = l2 - l1
            dy = y2 - y1
            if np.any(gap <= 0):
                raise AssumptionError("loss is not strictly increasing")
            if np.any(gap < self.kappa_lower * dy - slack):
                raise AssumptionError("loss violates the lower slope bound")
            if np.any(gap > self.kappa_upper * dy + slack):
                raise AssumptionError("loss violates the upper slope bound")
            if self.growth > 0:
                bound = self.growth * (1.0 + np.abs(y1))
                if np.any(np.abs(l1) > bound + slack):
                    raise AssumptionError("loss violates the linear growth bound")


def lipschitz_ratio(loss: LossSpec) -> float:
    """Slope ratio of the loss; the shift operator inherits it as a
    Lipschitz constant with respect to sample-mean distance."""
    if loss.kappa_lower <= 0:
        raise ConfigError("kappa_lower must be positive")
    return loss.kappa_upper / loss.kappa_lower


def eval_L(loss: LossSpec, t: float, sample, tol: float = None) -> float:
    """Smallest x >= 0 with mean loss(t, x + sample) >= 0, within tol.

    Returns 0 immediately when the constraint already holds. Otherwise the
    root is bracketed by doubling (the lower slope bound guarantees a finite
    bracket) and polished by Brent's method.
    """
    eta = _values(sample)
    if tol is None:
        tol = 1e-8 * max(1.0, float(np.abs(eta).max()))
    if tol <= 0:
        raise ConfigError("tolerance must be positive")

    def mean_loss(x):
        vals = np.asarray(loss.loss(t, x + eta), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise NumericError("loss produced non-finite values")
        return float(vals.mean())

    m0 = mean_loss(0.0)
    if m0 >= 0.0:
        return 0.0
    hi = 1.0
    for _ in range(_MAX_DOUBLINGS):
        if mean_loss(hi) >= 0.0:
            break
        hi *= 2.0
    else:
        raise AssumptionError(
            "no acceptable shift found within 64 doublings; the loss cannot "
            "reach a non-negative mean on this sample")
    root = brentq(mean_loss, 0.0, hi, xtol=tol)
    return float(max(root, 0.0))


@dataclass(frozen=True)
class RiskMeasureSpec:
    """Time-indexed static risk measure with a benchmark level.

    kind "expected-shortfall" uses the exact empirical quantile integral;
    "custom-translation-invariant" takes a callable rho(t, values) plus a
    declared Lipschitz constant with respect to sample-mean distance.
    """

    kind: str = "expected-shortfall"
    alpha: Callable[[float], float] = field(default=lambda t: 0.05)
    benchmark: Callable[[float], float] = field(default=lambda t: 0.0)
    rho_fn: Callable[[float, np.ndarray], float] | None = None
    lipschitz: float | None = None

    def __post_init__(self):
        if self.kind not in ("expected-shortfall", "custom-translation-invariant"):
            raise ConfigError(f"unknown risk measure kind {self.kind!r}")
        if self.kind == "custom-translation-invariant":
            if self.rho_fn is None:
                raise ConfigError("custom risk measure needs rho_fn")
            if self.lipschitz is None or self.lipschitz <= 0:
                raise ConfigError(
                    "custom risk measure needs a declared Lipschitz constant")

    def rho(self, t: float, sample) -> float:
        if self.kind == "expected-shortfall":
            return eval_es(sample, self.alpha(t))
        return float(self.rho_fn(t, _values(sample)))

    def lipschitz_constant(self, times) -> float:
        """Lipschitz bound in sample-mean distance; 1/alpha for ES."""
        if self.kind == "expected-shortfall":
            alphas = np.array([self.alpha(t) for t in np.atleast_1d(times)])
            if np.any(alphas <= 0) or np.any(alphas >= 1):
                raise ConfigError("alpha schedule must stay in (0, 1)")
            return float(1.0 / alphas.min())
        return float(self.lipschitz)

    def validate(self, t: float = 0.0, trials: int = 32, size: int = 257,
                 seed: int = 0) -> None:
        """Empirical spot-check of monotonicity and translation invariance."""
        rng = np.random.default_rng(seed)
        for _ in range(trials):
            x = rng.standard_normal(size) * rng.uniform(0.5, 2.0)
            shift = rng.uniform(-3, 3)
            base = self.rho(t, x)
            if abs(self.rho(t, x + shift) - (base - shift)) > 1e-9 * max(1, abs(base)):
                raise AssumptionError("risk measure is not translation invariant")
            bump = rng.uniform(0, 1, size)
            if self.rho(t, x + bump) > base + 1e-12:
                raise AssumptionError("risk measure is not monotone")


def eval_es(sample, alpha: float) -> float:
    """Exact empirical Expected Shortfall at level alpha.

    Averages the value-at-risk curve over (0, alpha] under the empirical
    law: the lowest floor(alpha J) order statistics get weight 1/J and the
    next one the fractional remainder. Exactly translation invariant and
    monotone on samples.
    """
    values = _values(sample)
    if values.size < 1:
        raise ConfigError("empirical sample must be non-empty")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    ordered = np.sort(values)
    j = values.size
    k = int(np.floor(alpha * j + 1e-12))
    acc = ordered[:k].sum() / j
    frac = alpha - k / j
    if frac > 0:
        acc += frac * ordered[min(k, j - 1)]
    return float(-acc / alpha)


def eval_rho_reflection(rm: RiskMeasureSpec, t: float, sample) -> float:
    """Smallest non-negative shift bringing the risk below the benchmark.

    Translation invariance turns the implicit definition into the closed
    form max(0, rho(t, sample) - benchmark(t)); no root search needed.
    """
    return max(0.0, rm.rho(t, sample) - rm.benchmark(t))


class LossReflector:
    """Reflection operator driven by a running-loss constraint.

    The constraint value at a node is the sample-mean loss; the shift is
    the smallest non-negative translation restoring a non-negative mean.
    """

    def __init__(self, loss: LossSpec, tol: float = None):
        self.loss = loss
        self.tol = tol

    def constraint_mean(self, t: float, sample) -> float:
        return float(np.mean(self.loss.loss(t, _values(sample))))

    def constraint_se(self, t: float, sample) -> float:
        vals = np.asarray(self.loss.loss(t, _values(sample)), dtype=float)
        if vals.size < 2:
            return 0.0
        return float(vals.std(ddof=1) / np.sqrt(vals.size))

    def shift(self, t: float, sample) -> float:
        return eval_L(self.loss, t, sample, tol=self.tol)

    def shift_tol(self, sample) -> float:
        if self.tol is not None:
            return self.tol
        eta = _values(sample)
        return 1e-8 * max(1.0, float(np.abs(eta).max()))

    def lipschitz_constant(self, times) -> float:
        return lipschitz_ratio(self.loss)


class RhoReflector:
    """Reflection operator for a benchmark-constrained risk measure.

    The constraint value is benchmark(t) - rho(t, sample); feasibility
    means it is non-negative. The shift is closed-form by translation
    invariance.
    """

    def __init__(self, rm: RiskMeasureSpec, se_chunks: int = 4):
        self.rm = rm
        self.se_chunks = se_chunks

    def constraint_mean(self, t: float, sample) -> float:
        return float(self.rm.benchmark(t) - self.rm.rho(t, sample))

    def constraint_se(self, t: float, sample) -> float:
        # subsample spread: the risk functional has no per-path decomposition
        vals = _values(sample)
        k = self.se_chunks
        if vals.size < 2 * k:
            return 0.0
        chunks = np.array_split(vals, k)
        est = np.array([self.rm.rho(t, c) for c in chunks])
        return float(est.std(ddof=1) / np.sqrt(k))

    def shift(self, t: float, sample) -> float:
        return eval_rho_reflection(self.rm, t, sample)

    def shift_tol(self, sample) -> float:
        return 0.0

    def lipschitz_constant(self, times) -> float:
        return self.rm.lipschitz_constant(times)

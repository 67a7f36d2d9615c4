"""Run configuration: schema, parsing, and named model builders.

Configs are JSON with a published schema. Loss, benchmark, intensity and
generator functions are selected by name plus parameters; there is no
dynamic code loading. Hashing canonicalises the JSON (sorted keys,
normalised numbers) so identical configs share a fingerprint.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np
from jsonschema import Draft202012Validator

from .bsde import GeneratorSpec, RegressionBasisSpec
from .errors import ConfigError
from .insurance import InsuranceContract, MarketModel, PricingMeasure
from .reflection import LossSpec, RiskMeasureSpec
from .scenario import (
    CompensatorSpec,
    MarkSpace,
    TimeGrid,
    build_grid,
    simulate_bundle,
    simulate_local_time_clock,
)

_NUMBER = {"type": "number"}
_POS_NUMBER = {"type": "number", "exclusiveMinimum": 0}
_TIME_FN = {
    "type": "object",
    "properties": {
        "name": {"enum": ["constant", "linear", "sinusoidal"]},
        "value": _NUMBER, "intercept": _NUMBER, "slope": _NUMBER,
        "base": _NUMBER, "amplitude": _NUMBER, "period": _POS_NUMBER,
    },
    "required": ["name"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "scenario": {
            "type": "object",
            "properties": {
                "horizon": _POS_NUMBER,
                "steps": {"type": "integer", "minimum": 1},
                "refinement": {"enum": ["uniform", "geometric"]},
                "geometric_ratio": _POS_NUMBER,
                "paths": {"type": "integer", "minimum": 1},
                "brownian_dim": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "marks": {
                    "type": "object",
                    "properties": {
                        "labels": {"type": "array",
                                   "items": {"type": "string"},
                                   "minItems": 1},
                        "probs": {"type": "array", "items": _NUMBER,
                                  "minItems": 1},
                    },
                    "required": ["labels", "probs"],
                    "additionalProperties": False,
                },
                "compensator": {
                    "type": "object",
                    "properties": {
                        "kind": {"enum": ["constant-intensity",
                                          "time-varying-intensity",
                                          "population-mortality",
                                          "local-time-clock"]},
                        "intensity": {"anyOf": [
                            _NUMBER,
                            {"type": "array", "items": _NUMBER},
                            _TIME_FN]},
                        "population": {"type": "integer", "minimum": 1},
                        "envelope": _NUMBER,
                        "substeps": {"type": "integer", "minimum": 1},
                    },
                    "required": ["kind"],
                    "additionalProperties": False,
                },
            },
            "required": ["horizon", "steps", "paths", "seed", "compensator"],
            "additionalProperties": False,
        },
        "solver": {
            "type": "object",
            "properties": {
                "basis": {"type": "array", "items": {"type": "string"},
                          "minItems": 1},
                "ridge": {"type": "number", "minimum": 0},
                "beta": _POS_NUMBER,
                "tol": _POS_NUMBER,
                "max_iters": {"type": "integer", "minimum": 1},
                "delta_l": _POS_NUMBER,
            },
            "additionalProperties": False,
        },
        "generator": {
            "type": "object",
            "properties": {
                "f": {
                    "type": "object",
                    "properties": {
                        "name": {"enum": ["zero", "linear"]},
                        "y_coeff": _NUMBER, "u_coeff": _NUMBER,
                        "const": _NUMBER,
                    },
                    "required": ["name"],
                    "additionalProperties": False,
                },
                "g": {
                    "type": "object",
                    "properties": {
                        "name": {"enum": ["zero", "linear"]},
                        "y_coeff": _NUMBER, "z_coeff": _NUMBER,
                        "const": _NUMBER,
                    },
                    "required": ["name"],
                    "additionalProperties": False,
                },
                "terminal": {
                    "type": "object",
                    "properties": {
                        "name": {"enum": ["brownian", "counting", "constant"]},
                        "value": _NUMBER,
                    },
                    "required": ["name"],
                    "additionalProperties": False,
                },
            },
            "required": ["terminal"],
            "additionalProperties": False,
        },
        "loss": {
            "type": "object",
            "properties": {
                "name": {"enum": ["linear", "shifted-sine"]},
                "slope": _POS_NUMBER,
                "intercept": _NUMBER,
                "horizon_coeff": _NUMBER,
                "amplitude": _NUMBER,
            },
            "required": ["name", "slope"],
            "additionalProperties": False,
        },
        "risk_measure": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["expected-shortfall"]},
                "alpha": _TIME_FN,
                "benchmark": _TIME_FN,
            },
            "required": ["kind", "alpha", "benchmark"],
            "additionalProperties": False,
        },
        "market": {
            "type": "object",
            "properties": {
                "rate": {"anyOf": [_NUMBER, _TIME_FN]},
                "drift": {"anyOf": [_NUMBER, _TIME_FN]},
                "volatility": {"anyOf": [_POS_NUMBER, _TIME_FN]},
                "spot": _POS_NUMBER,
            },
            "additionalProperties": False,
        },
        "contract": {
            "type": "object",
            "properties": {
                "insured": {"type": "integer", "minimum": 0},
                "premium": {"anyOf": [_NUMBER, _TIME_FN]},
                "death_benefit": _NUMBER,
                "survival_benefit": _NUMBER,
                "causes": {
                    "type": "object",
                    "properties": {
                        "labels": {"type": "array",
                                   "items": {"type": "string"},
                                   "minItems": 1},
                        "probs": {"type": "array", "items": _NUMBER},
                    },
                    "required": ["labels", "probs"],
                    "additionalProperties": False,
                },
                "hazard": {"anyOf": [_NUMBER,
                                     {"type": "array", "items": _NUMBER},
                                     _TIME_FN]},
            },
            "required": ["insured", "causes", "hazard"],
            "additionalProperties": False,
        },
        "measure": {
            "type": "object",
            "properties": {"loading": _NUMBER},
            "additionalProperties": False,
        },
        "output": {
            "type": "object",
            "properties": {
                "directory": {"type": "string"},
                "formats": {"type": "array",
                            "items": {"enum": ["csv", "json"]}},
            },
            "additionalProperties": False,
        },
    },
    "required": ["scenario"],
    "additionalProperties": False,
}

_validator = Draft202012Validator(CONFIG_SCHEMA)


def validate_config(config: dict) -> dict:
    errors = sorted(_validator.iter_errors(config), key=lambda e: e.json_path)
    if errors:
        first = errors[0]
        raise ConfigError(f"config field {first.json_path}: {first.message}")
    return config


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            config = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return validate_config(config)


def _canonical(obj):
    if isinstance(obj, dict):
        return {k: _canonical(obj[k]) for k in sorted(obj)}
    if isinstance(obj, list):
        return [_canonical(v) for v in obj]
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, (int, float)):
        as_float = float(obj)
        if as_float == int(as_float) and abs(as_float) < 2**53:
            return int(as_float)
        return repr(as_float)
    raise ConfigError(f"unhashable config value {obj!r}")


def config_hash(config: dict) -> str:
    canonical = json.dumps(_canonical(config), sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


# ---------------------------------------------------------------------------
# named builders


def build_time_fn(spec):
    """Deterministic named time function."""
    if isinstance(spec, (int, float)):
        return lambda t, _v=float(spec): _v
    name = spec["name"]
    if name == "constant":
        v = float(spec.get("value", 0.0))
        return lambda t: v
    if name == "linear":
        a = float(spec.get("intercept", 0.0))
        b = float(spec.get("slope", 0.0))
        return lambda t: a + b * t
    if name == "sinusoidal":
        base = float(spec.get("base", 1.0))
        amp = float(spec.get("amplitude", 0.0))
        period = float(spec.get("period", 1.0))
        return lambda t: base + amp * math.sin(2.0 * math.pi * t / period)
    raise ConfigError(f"unknown time function {name!r}")


def build_marks(section: dict | None) -> MarkSpace:
    if not section:
        return MarkSpace.single()
    return MarkSpace(tuple(section["labels"]),
                     np.asarray(section["probs"], dtype=float))


def build_compensator(section: dict, marks: MarkSpace) -> CompensatorSpec:
    kind = section["kind"]
    intensity = section.get("intensity", 1.0)
    if kind == "local-time-clock":
        return CompensatorSpec.local_time(substeps=section.get("substeps", 100))
    if isinstance(intensity, dict):
        fn = build_time_fn(intensity)
        rate = lambda t: np.full(marks.size, fn(t))
    elif isinstance(intensity, list):
        arr = np.asarray(intensity, dtype=float)
        if arr.shape != (marks.size,):
            raise ConfigError("per-mark intensity list must match the marks")
        rate = lambda t: arr
    else:
        arr = np.full(marks.size, float(intensity))
        rate = lambda t: arr
    envelope = section.get("envelope")
    if kind == "constant-intensity":
        return CompensatorSpec(kind=kind, intensity=rate, envelope=envelope)
    if kind == "time-varying-intensity":
        return CompensatorSpec(kind=kind, intensity=rate, envelope=envelope)
    if kind == "population-mortality":
        return CompensatorSpec(kind=kind, intensity=rate, envelope=envelope,
                               population=int(section["population"]))
    raise ConfigError(f"unknown compensator kind {kind!r}")


def build_scenario(config: dict):
    """Grid, marks, compensator spec and a freshly simulated bundle."""
    sc = config["scenario"]
    grid = build_grid(sc["horizon"], sc["steps"],
                      sc.get("refinement", "uniform"),
                      sc.get("geometric_ratio", 1.05))
    marks = build_marks(sc.get("marks"))
    comp = build_compensator(sc["compensator"], marks)
    if comp.kind == "local-time-clock":
        bundle = simulate_local_time_clock(grid, sc["paths"], sc["seed"],
                                           substeps=comp.local_time_substeps)
    else:
        bundle = simulate_bundle(comp, marks, grid, sc["paths"],
                                 dims=sc.get("brownian_dim", 1),
                                 seed=sc["seed"])
    return grid, marks, comp, bundle


def build_loss(section: dict, horizon: float) -> LossSpec:
    name = section["name"]
    slope = float(section["slope"])
    intercept = float(section.get("intercept", 0.0))
    if name == "linear":
        coeff = float(section.get("horizon_coeff", 0.0))

        def loss(t, y):
            return slope * np.asarray(y) + intercept + coeff * (horizon - t)

        growth = max(slope, abs(intercept) + abs(coeff) * horizon)
        return LossSpec(loss=loss, kappa_lower=slope, kappa_upper=slope,
                        growth=growth)
    if name == "shifted-sine":
        amp = float(section.get("amplitude", 0.0))
        if abs(amp) >= slope:
            raise ConfigError("shifted-sine loss needs |amplitude| < slope")

        def loss(t, y):
            y = np.asarray(y)
            return slope * y + amp * np.sin(y) + intercept

        return LossSpec(loss=loss, kappa_lower=slope - abs(amp),
                        kappa_upper=slope + abs(amp),
                        growth=slope + abs(amp) + abs(intercept))
    raise ConfigError(f"unknown loss {name!r}")


def build_generator(section: dict) -> GeneratorSpec:
    f_spec = section.get("f", {"name": "zero"})
    g_spec = section.get("g", {"name": "zero"})
    term = section["terminal"]

    f = None
    lf = lp = 0.0
    if f_spec["name"] == "linear":
        ay = float(f_spec.get("y_coeff", 0.0))
        au = float(f_spec.get("u_coeff", 0.0))
        c = float(f_spec.get("const", 0.0))

        def f(t, y, u, phi, state, _ay=ay, _au=au, _c=c):
            return _ay * y + _au * (u * phi).sum(axis=1) + _c

        lf, lp = abs(ay), abs(au)
    g = None
    lg = lw = 0.0
    if g_spec["name"] == "linear":
        by = float(g_spec.get("y_coeff", 0.0))
        bz = float(g_spec.get("z_coeff", 0.0))
        c = float(g_spec.get("const", 0.0))

        def g(t, y, z, u, state, _by=by, _bz=bz, _c=c):
            return _by * y + _bz * z[:, 0] + _c

        lg, lw = abs(by), abs(bz)

    name = term["name"]
    if name == "brownian":
        terminal = lambda state: state.w[:, 0]
    elif name == "counting":
        terminal = lambda state: state.counts_total.astype(float)
    elif name == "constant":
        v = float(term.get("value", 0.0))
        terminal = lambda state: np.full(state.w.shape[0], v)
    else:
        raise ConfigError(f"unknown terminal {name!r}")

    return GeneratorSpec(f=f, g=g, terminal=terminal,
                         lipschitz=(lf, lp, lg, lw))


def build_risk_measure(section: dict) -> RiskMeasureSpec:
    alpha = build_time_fn(section["alpha"])
    bench = build_time_fn(section["benchmark"])
    return RiskMeasureSpec(kind="expected-shortfall", alpha=alpha,
                           benchmark=bench)


def build_market(section: dict | None) -> MarketModel:
    section = section or {}

    def fn_or_value(key, default):
        raw = section.get(key, default)
        return build_time_fn(raw) if isinstance(raw, dict) else raw

    return MarketModel(rate=fn_or_value("rate", 0.0),
                       drift=fn_or_value("drift", 0.0),
                       volatility=fn_or_value("volatility", 0.2),
                       spot=float(section.get("spot", 1.0)))


def build_contract(section: dict) -> InsuranceContract:
    causes = build_marks(section["causes"])
    hazard = section["hazard"]
    if isinstance(hazard, dict):
        fn = build_time_fn(hazard)
        hz = lambda t: np.full(causes.size, fn(t))
    elif isinstance(hazard, list):
        hz = np.asarray(hazard, dtype=float)
    else:
        hz = float(hazard)
    premium = section.get("premium", 0.0)
    if isinstance(premium, dict):
        premium = build_time_fn(premium)
    return InsuranceContract(
        insured=int(section["insured"]), causes=causes, hazard=hz,
        premium=premium,
        death_benefit=float(section.get("death_benefit", 0.0)),
        survival_benefit=float(section.get("survival_benefit", 1.0)))


def build_pricing_measure(section: dict | None) -> PricingMeasure:
    section = section or {}
    return PricingMeasure(loading=float(section.get("loading", 0.0)))


def build_basis(config: dict) -> RegressionBasisSpec:
    solver = config.get("solver", {})
    return RegressionBasisSpec(tuple(solver.get("basis", ("const", "w"))),
                               ridge=float(solver.get("ridge", 0.0)))


def solver_params(config: dict) -> dict:
    solver = config.get("solver", {})
    return {
        "beta": float(solver.get("beta", 1.0)),
        "tol": float(solver.get("tol", 1e-9)),
        "max_iters": int(solver.get("max_iters", 15)),
        "delta_l": solver.get("delta_l"),
    }

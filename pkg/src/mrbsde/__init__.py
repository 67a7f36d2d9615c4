"""Mean-reflected backward SDE solver on joint Brownian/marked-point-process
scenarios, with an insurance super-hedging application."""

from .bsde import (
    BackwardSolution,
    ContractionPlan,
    GeneratorSpec,
    NodeState,
    RegressionBasisSpec,
    apriori_diagnostic,
    contraction_threshold,
    plan_contraction,
    solve_driver_known,
    solve_lipschitz,
    weighted_distance,
)
from .errors import (
    AssumptionError,
    ConfigError,
    ConvergenceError,
    MrbsdeError,
    NumericError,
)
from .insurance import (
    HedgePlan,
    InsuranceContract,
    MarketModel,
    PricingMeasure,
    bond_price,
    build_hedging_bsde,
    hedging_view,
    price_and_hedge,
    replay_wealth,
    simulate_insurance_bundle,
)
from .mean_reflect import (
    FlatnessReport,
    ReflectedSolution,
    flatness_report,
    gamma_map,
    reflect_fixed_generator,
    representation_check,
    solve_mean_reflected,
)
from .reflection import (
    EmpiricalSample,
    LossReflector,
    LossSpec,
    RhoReflector,
    RiskMeasureSpec,
    eval_L,
    eval_es,
    eval_rho_reflection,
    lipschitz_ratio,
)
from .scenario import (
    CompensatorSpec,
    MarkSpace,
    MppPath,
    PathBundle,
    TimeGrid,
    build_grid,
    check_assumptions,
    compensated_integral,
    load_bundle,
    save_bundle,
    simulate_bundle,
    simulate_local_time_clock,
    weighted_norm,
)

__version__ = "0.1.0"

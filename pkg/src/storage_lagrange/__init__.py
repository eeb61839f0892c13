"""Look-ahead storage dispatch by bisection on the state-of-charge dual."""

import types as _types

from .costs import (
    CostSource,
    DomainError,
    MixedSource,
    PiecewiseLinearCost,
    PiecewiseSeries,
    QuadraticCost,
    QuadraticSeries,
    TerminalCost,
    eval_cost,
    inverse_marginal,
    marginal,
    marginal_envelope,
    terminal_marginal,
)
from .oracle import (
    DpConfig,
    InfeasibleScheduleError,
    KktReport,
    check_feasible,
    dp_solve,
    kkt_residuals,
)
from .policy import (
    Dispatch,
    OutcomeKind,
    PolicyVariant,
    SimOutcome,
    StorageSpec,
    policy_dispatch,
    simulate,
    soc_step,
)
from .scenario import (
    Scenario,
    ScenarioFormatError,
    generate_pwl,
    generate_quadratic,
    read_scenario,
    read_schedule,
    write_scenario,
    write_schedule,
)
from .schedule import Schedule, objective_of
from .search import (
    BoundsResult,
    Classification,
    ConvergenceError,
    DualSolution,
    SearchConfig,
    classify,
    solve,
    solve_bounds,
    solve_horizon,
    warm_control,
)

__version__ = "0.1.0"

__all__ = sorted(name for name, value in globals().items()
                 if not name.startswith("_") and not isinstance(value, _types.ModuleType))

"""refmort: screening-effect estimation from refined (incidence-based) mortality."""

__version__ = "0.1.0"

from .bootstrap import BootstrapConfig, bootstrap_estimate
from .errors import (
    ConfigurationError,
    ConvergenceError,
    EstimationError,
    InputError,
    RefmortError,
    SchemaError,
    TruncationError,
    ValidationError,
)
from .estimators import (
    EstimateResult,
    FullModelParams,
    Method,
    ModelSpec,
    estimate_method0,
    estimate_method1,
    estimate_method2,
    estimate_method3,
)
from .glm import DesignMatrix, GlmFit, fit_poisson, log_likelihood, predict_mean
from .lagmodel import (
    LagHistogram,
    LagParameters,
    LagSurvival,
    estimate_lag_survival,
    lag_log_likelihood,
    mle_lag_params,
    survival_from_params,
)
from .registry import (
    MortalityCell,
    MortalityTable,
    RawMortalityTable,
    RawStratum,
    RolloutSchedule,
    ScheduleEntry,
    ScreeningGroup,
    combine_to_raw,
    parse_mortality_csv,
    parse_raw_mortality_csv,
    parse_schedule_csv,
    refresh_prop_target,
    split_risk_time,
    validate,
    write_mortality_csv,
    write_raw_mortality_csv,
    write_schedule_csv,
)
from .simulator import (
    Scenario,
    SimOutput,
    TruthRecord,
    expected_cells,
    load_scenario,
    simulate,
)
from .splines import KnotSet, knots_from_data, natural_basis

__all__ = [name for name in dir() if not name.startswith("_")]

"""Safe, context-aware Gaussian-process bandits for leveling tasks.

The package keeps an unknown response ``f(z, d)`` close to a target while
certifying every recommended dose safe through Lipschitz-tightened GP
confidence bounds.
"""

from .bounds import BetaSchedule, BoundsTable, DoseGrid, EvalGrid, build_dose_grid, build_eval_grid, compute_bounds
from .calculator import CalculatorParams, calculator_dose
from .environment import (
    GPSampledResponse,
    LinearCFResponse,
    MealEvent,
    ProblemSpec,
    SaturatingResponse,
    audit_lipschitz,
    initial_safe_set,
    observe,
    sample_meal_events,
    true_response,
)
from .errors import (
    ConfigError,
    DegenerateSetError,
    DimensionError,
    DomainError,
    EscadaError,
    NumericalError,
    SaturationError,
)
from .gp import GPConfig, GPState, empty_state, gp_predict, gp_sample_on_grid, gp_update, information_gain
from .kernels import (
    AbsoluteDoseMetric,
    KernelDoseMetric,
    KernelSpec,
    LipschitzCertificate,
    inverse_dose_metric,
    kernel_eval,
    kernel_matrix,
    kernel_metric,
)
from .policies import Recommendation, escada_step, gp_ucb_select, random_safe_select, taco_select, thompson_select
from .safe_sets import SafeSet, expand_safe_set, reachability_closure, safe_path

__version__ = "0.1.0"

"""SGD near non-isolated minima: landscapes, local conditions, stability bounds and Monte Carlo checks."""

__version__ = "0.1.0"

from .bounds import (
    BoundInputs,
    BoundReport,
    check_constant_lr_bound,
    check_decreasing_lr_bound,
    compute_bn,
    compute_CN,
    concentration_rhs,
    predicted_rate,
)
from .conditions import (
    ConditionKind,
    ConditionReport,
    check_condition,
    check_hcprc_rank,
    estimate_local_constants,
    implication_matrix,
)
from .landscapes import (
    FiniteUnion,
    Landscape,
    NeighborhoodSpec,
    Point,
    PowerBasin,
    Segment,
    Sphere,
    circle_basin,
    dist_and_project,
    make_landscape,
    oracle_eval,
)
from .montecarlo import (
    ExperimentConfig,
    MCResult,
    RateFit,
    compare_to_bounds,
    estimate_concentration,
    estimate_stability,
    fit_rate_slope,
    wilson_interval,
)
from .sgd import (
    Constant,
    Decreasing,
    GaussianNoise,
    SgdConfig,
    run_trajectory,
    simulate_many,
    supermartingale_probe,
)

__all__ = [name for name in dir() if not name.startswith("_")]

"""Risk-sensitive dynamic pricing for demand response with online demand learning."""

from __future__ import annotations

from .config import ExperimentConfig, load_config, parse_config
from .demand import (
    AggregateIID,
    AlternatingCost,
    ConstantCost,
    DemandModel,
    DemandParams,
    ParamBox,
    SequenceCost,
    TruncatedNormal,
    Uniform,
    price_bound,
)
from .estimation import EstimatorState, empirical_quantile, truncate
from .harness import Scenario, run_episode, run_monte_carlo
from .policy import PolicyConfig, oracle_price, risk_revenue

__version__ = "0.1.0"

"""Labour-market ABM simulation and neural posterior estimation."""

__version__ = "0.1.0"

from lmsbi.errors import LmsbiError, NumericError, ResourceError, ValidationError
from lmsbi.market import (
    BehaviouralParams,
    MacroTrajectory,
    MarketSpec,
    MarketState,
    MicroTrajectory,
    SimulationConfig,
    init_state,
    micro_memory_estimate,
    simulate,
    simulate_micro,
    step,
    target_demand,
)

__all__ = [
    "BehaviouralParams",
    "LmsbiError",
    "MacroTrajectory",
    "MarketSpec",
    "MarketState",
    "MicroTrajectory",
    "NumericError",
    "ResourceError",
    "SimulationConfig",
    "ValidationError",
    "init_state",
    "micro_memory_estimate",
    "simulate",
    "simulate_micro",
    "step",
    "target_demand",
]

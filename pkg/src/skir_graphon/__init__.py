"""Controlled SKIR rumor-propagation game on block graphons."""

from .model import (
    Aggregates,
    BlockGraphon,
    ControlBound,
    GroupParams,
    PiecewiseConstant,
    Policy,
    State,
    existence_bound,
)
from .solver import EquilibriumResult, FlowGrid, SolverConfig, TimeGrid, solve_equilibrium

__version__ = "0.1.0"

__all__ = [
    "Aggregates",
    "BlockGraphon",
    "ControlBound",
    "EquilibriumResult",
    "FlowGrid",
    "GroupParams",
    "PiecewiseConstant",
    "Policy",
    "SolverConfig",
    "State",
    "TimeGrid",
    "existence_bound",
    "solve_equilibrium",
]

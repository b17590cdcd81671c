"""Adaptive state aggregation for SARSA with exact evaluation oracles."""
from .adaptive import EventLog, PasaParams, PasaState, RepartitionReport
from .envs import (GarnetSpec, GridworldSpec, LogisticsSpec, TabularEnv, sample_garnet,
                   sample_gridworld, sample_logistics, step)
from .errors import (CapacityError, ConfigError, InvalidArgument, InvalidSplit,
                     InvalidSplitVector)
from .partition import (CellIndexTree, Interval, OrderedPartition, apply_split_vector,
                        bar_membership, build_base_partition, cell_of, equal_partition,
                        split_cell, split_interval)
from .sarsa import Agent, AgentConfig, SarsaParams, WeightMatrix, run_episodeless_loop

__all__ = [
    "Agent", "AgentConfig", "CapacityError", "CellIndexTree", "ConfigError", "EventLog",
    "GarnetSpec", "GridworldSpec", "Interval", "InvalidArgument", "InvalidSplit",
    "InvalidSplitVector", "LogisticsSpec", "OrderedPartition", "PasaParams", "PasaState",
    "RepartitionReport", "SarsaParams", "TabularEnv", "WeightMatrix", "apply_split_vector",
    "bar_membership", "build_base_partition", "cell_of", "equal_partition",
    "run_episodeless_loop", "sample_garnet", "sample_gridworld", "sample_logistics",
    "split_cell", "split_interval", "step",
]

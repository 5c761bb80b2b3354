"""Schedule transformations for fully sharded data-parallel training graphs."""

from .cost_model import ClusterConfig, CostModel, parse_size
from .errors import (ConfigError, Infeasible, InfeasibleBaseline, OffloadInfeasible, OrderWarning,
                     PassError, ReloadInfeasible)
from .graph_ir import (Graph, Node, NodeKind, OptimizerStateFragment, Parameter, Phase, Schedule,
                       initial_schedule, validate)
from .pipeline import PipelineResult, run_pipeline
from .simulator import MemoryProfile, SimReport, simulate
from .workload import generate_workload

__version__ = "0.1.0"

__all__ = [
    "ClusterConfig", "CostModel", "parse_size",
    "ConfigError", "Infeasible", "InfeasibleBaseline", "OffloadInfeasible", "OrderWarning",
    "PassError", "ReloadInfeasible",
    "Graph", "Node", "NodeKind", "OptimizerStateFragment", "Parameter", "Phase", "Schedule",
    "initial_schedule", "validate",
    "PipelineResult", "run_pipeline", "MemoryProfile", "SimReport", "simulate", "generate_workload",
]

"""Deterministic workbench for intermittently powered DNN inference."""

from .errors import (
    DesignError,
    FeasibilityError,
    InasError,
    NetworkValidationError,
    ParameterError,
    ParseError,
    SchemaError,
    ShapeError,
    SupplyError,
    UnrecoverableStateError,
)
from .executor import ExecutionDesign, TileConfig, run_reference, run_tiled, tile_footprint
from .explorer import (
    ArchConfig,
    DesignCaps,
    RewardParams,
    SearchSpace,
    best_design,
    enumerate_designs,
    evolve,
    extract_subnet,
    surrogate_accuracy,
)
from .intermittent import CostParams, FaultTrace, PowerParams, make_fault_trace, recover, simulate
from .model import Conv2D, FullyConnected, MaxPool2D, NetworkSpec, QTensor, dequantize, quantize
from .perfmodel import feasible, predict
from .scheduler import TaskSpec, dbf, sbf, schedulable_edf, simulate_schedule, task_wcet

__version__ = "0.1.0"

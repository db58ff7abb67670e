"""fedsim: sequential federated-learning simulation on a handful of devices.

The package simulates cross-device FL rounds without one process per client:
each simulated device executes its assigned clients back to back, persists
client state to disk between rounds, and ships one folded partial per round.
A fitted linear workload model drives a greedy assignment of clients to
devices so that no device stalls the round barrier.

Entry points: `SimulationEngine` for programmatic runs, `fedsim` (see
`fedsim.cli`) for YAML-driven experiments.
"""

from fedsim.aggregate import (
    AggregateResult,
    DevicePartial,
    flat_aggregate,
    global_fold,
    local_fold,
    server_update,
)
from fedsim.core import (
    ALL_HISTORY,
    CLOCK_MODES,
    SCHEDULING_MODES,
    SCHEMES,
    ClientProfile,
    ClientSelection,
    ConfigError,
    DataSlice,
    SimConfig,
    select_clients,
    stream_rng,
)
from fedsim.data import (
    PartitionSpec,
    SyntheticDataset,
    export_partitions,
    generate,
    partition,
)
from fedsim.engine import (
    DeviceModel,
    RoundOutcome,
    SimulationEngine,
    make_device_models,
)
from fedsim.estimate import (
    TimingHistory,
    TimingRecord,
    WorkloadFit,
    estimation_error,
    fit_device,
)
from fedsim.metrics import (
    CostLedger,
    expected_costs,
    reconcile,
    scheme_formulas,
)
from fedsim.schedule import (
    RoundPlan,
    greedy_assign,
    makespan,
    schedule,
    uniform_division,
)
from fedsim.statestore import ClientState, StateStore
from fedsim.trainer import (
    PLUGINS,
    AggOp,
    FedAvg,
    FedDyn,
    FedNova,
    FedProx,
    ModelParams,
    ParamBundle,
    Scaffold,
    client_execute,
    evaluate,
    make_plugin,
)

__version__ = "0.1.0"

__all__ = [
    "ALL_HISTORY",
    "AggOp",
    "AggregateResult",
    "CLOCK_MODES",
    "ClientProfile",
    "ClientSelection",
    "ClientState",
    "ConfigError",
    "CostLedger",
    "DataSlice",
    "DeviceModel",
    "DevicePartial",
    "FedAvg",
    "FedDyn",
    "FedNova",
    "FedProx",
    "ModelParams",
    "PLUGINS",
    "ParamBundle",
    "PartitionSpec",
    "RoundOutcome",
    "RoundPlan",
    "SCHEDULING_MODES",
    "SCHEMES",
    "Scaffold",
    "SimConfig",
    "SimulationEngine",
    "StateStore",
    "SyntheticDataset",
    "TimingHistory",
    "TimingRecord",
    "WorkloadFit",
    "client_execute",
    "estimation_error",
    "evaluate",
    "expected_costs",
    "export_partitions",
    "fit_device",
    "flat_aggregate",
    "generate",
    "global_fold",
    "greedy_assign",
    "local_fold",
    "make_device_models",
    "make_plugin",
    "makespan",
    "partition",
    "reconcile",
    "scheme_formulas",
    "schedule",
    "select_clients",
    "server_update",
    "stream_rng",
    "uniform_division",
]

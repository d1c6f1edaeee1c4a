"""Multi-period AC OPF with storage: centralized Newton-KKT and distributed
OCD/OCD-C solvers, Hessian-affinity spectral partitioning, and receding-horizon
MPC experiment drivers."""

__version__ = "0.1.0"

from .central import SolveReport, solve_centralized
from .formulation import (
    HorizonProblem,
    KktSystem,
    VariableLayout,
    assemble_hessian,
    build_horizon_problem,
    eval_kkt_residual,
    eval_objective,
)
from .mpc import METHOD_CENTRALIZED, MpcConfig, MpcResult, run_mpc
from .model import (
    Branch,
    Bus,
    Generator,
    PowerSystem,
    StorageDevice,
    TimeSeries,
    build_admittance,
    parse_case,
    parse_timeseries,
    serialize_case,
)
from .ocd import (
    METHOD_OCD,
    METHOD_OCDC,
    DistributedReport,
    solve_distributed,
)
from .partition import (
    AffinityMatrix,
    Partition,
    compute_affinity,
    derive_boundary,
    partition_from_json,
    partition_to_json,
    spectral_partition,
)

__all__ = [
    "AffinityMatrix",
    "Branch",
    "Bus",
    "DistributedReport",
    "Generator",
    "HorizonProblem",
    "KktSystem",
    "METHOD_CENTRALIZED",
    "METHOD_OCD",
    "METHOD_OCDC",
    "MpcConfig",
    "MpcResult",
    "Partition",
    "PowerSystem",
    "SolveReport",
    "StorageDevice",
    "TimeSeries",
    "VariableLayout",
    "assemble_hessian",
    "build_admittance",
    "build_horizon_problem",
    "compute_affinity",
    "derive_boundary",
    "eval_kkt_residual",
    "eval_objective",
    "parse_case",
    "parse_timeseries",
    "partition_from_json",
    "partition_to_json",
    "run_mpc",
    "serialize_case",
    "solve_centralized",
    "solve_distributed",
    "spectral_partition",
    "__version__",
]

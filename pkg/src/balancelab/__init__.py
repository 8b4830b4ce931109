"""balancelab: a load-balancing algorithm lab.

The same selection engine drives a deterministic processor-sharing cluster
simulator (with a benchmark harness) and a live HTTP/1.1 reverse proxy.
"""

from .algorithms import KINDS, AlgorithmConfig, Rng
from .core import (
    GET,
    POST,
    UNLIMITED,
    BackendPool,
    BalanceError,
    HardwareProfile,
    Headers,
    MetricsRecord,
    Request,
    SelectionDecision,
    ServerSpec,
    ServerState,
    dispatch,
    release,
    set_weight,
)
from .harness import RunMatrix, SummaryRow, default_matrix, emit, run_matrix, worker_sweep
from .hashing import map_hash_to_server, stable_hash
from .simcluster import (
    ENVIRONMENTS,
    EnvironmentProfile,
    ServiceModel,
    build_pool,
    cpu_utilization,
    run_simulation,
    service_rate,
)
from .workload import PageCatalog, Scenario, generate, scenario_suite

__version__ = "0.1.0"

__all__ = [
    "AlgorithmConfig",
    "BackendPool",
    "BalanceError",
    "ENVIRONMENTS",
    "EnvironmentProfile",
    "GET",
    "HardwareProfile",
    "Headers",
    "KINDS",
    "MetricsRecord",
    "PageCatalog",
    "POST",
    "Request",
    "Rng",
    "RunMatrix",
    "Scenario",
    "SelectionDecision",
    "ServerSpec",
    "ServerState",
    "ServiceModel",
    "SummaryRow",
    "UNLIMITED",
    "build_pool",
    "cpu_utilization",
    "default_matrix",
    "dispatch",
    "emit",
    "generate",
    "map_hash_to_server",
    "release",
    "run_matrix",
    "run_simulation",
    "scenario_suite",
    "service_rate",
    "set_weight",
    "stable_hash",
    "worker_sweep",
    "__version__",
]

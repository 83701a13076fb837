"""Event-triggered, compressed, decentralized SGD simulator.

The package simulates n workers on a connected communication graph running
local SGD with occasional gossip rounds.  Each gossip round is event-triggered
(a node only speaks when its parameters drifted far enough from what its
neighbours believe) and compressed (what it sends is a lossy encoding of the
drift).  Baselines with always-on communication and with exact exchange are
included, along with bit-level communication accounting, offline audits of the
algorithm's invariants, and a small CLI.
"""

from .mixing_graph import (
    MixingMatrix,
    SpectralInfo,
    ConsensusParams,
    build_ring,
    build_complete,
    build_custom,
    spectral_info,
    consensus_params,
)
from .compression import KINDS, make_operator, compress, omega_of, bit_cost_model, certify_omega
from .objectives import (
    QuadraticObjective,
    LogisticObjective,
    NonConvexObjective,
    GradOracle,
    make_quadratic,
    make_logistic,
    make_nonconvex,
)
from .sparq_core import (
    COLUMNS,
    ScheduleError,
    SyncSchedule,
    TriggerSchedule,
    LRSchedule,
    init_run,
    local_step,
    sync_round,
    run,
    DivergenceError,
)
from .baselines import run_choco, choco_reference, run_vanilla_exact, run_centralized, run_baseline
from .harness import RunLog, AuditReport, audit, compare_bits_to_accuracy, rate_fit, execute
from .cli_config import ExperimentConfig, parse_config, render_config, ConfigError

__version__ = "0.1.0"

__all__ = [
    "MixingMatrix",
    "SpectralInfo",
    "ConsensusParams",
    "build_ring",
    "build_complete",
    "build_custom",
    "spectral_info",
    "consensus_params",
    "KINDS",
    "make_operator",
    "compress",
    "omega_of",
    "bit_cost_model",
    "certify_omega",
    "QuadraticObjective",
    "LogisticObjective",
    "NonConvexObjective",
    "GradOracle",
    "make_quadratic",
    "make_logistic",
    "make_nonconvex",
    "COLUMNS",
    "ScheduleError",
    "SyncSchedule",
    "TriggerSchedule",
    "LRSchedule",
    "init_run",
    "local_step",
    "sync_round",
    "run",
    "DivergenceError",
    "run_choco",
    "choco_reference",
    "run_baseline",
    "run_vanilla_exact",
    "run_centralized",
    "RunLog",
    "AuditReport",
    "audit",
    "compare_bits_to_accuracy",
    "rate_fit",
    "execute",
    "ExperimentConfig",
    "parse_config",
    "render_config",
    "ConfigError",
]

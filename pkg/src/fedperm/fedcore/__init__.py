"""Round state machines for FedPerm and its baselines."""

from fedperm.fedcore.attack import attacker_client, is_attacker
from fedperm.fedcore.baselines import run_cdp, run_fedavg, run_ldp
from fedperm.fedcore.config import ConfigError, FederationConfig
from fedperm.fedcore.protocol import (
    RoundError,
    ClientUpdateMsg,
    PlainAggregate,
    PlainQuery,
    client_finalize,
    client_round,
    make_keys,
    run_fedperm,
    server_round,
)
from fedperm.fedcore.records import METRICS_COLUMNS, RoundRecord, RunResult, metrics_csv

RUNNERS = {"fedperm": run_fedperm, "fedavg": run_fedavg, "cdp": run_cdp, "ldp": run_ldp}

__all__ = [
    "RUNNERS",
    "METRICS_COLUMNS",
    "ClientUpdateMsg",
    "ConfigError",
    "FederationConfig",
    "PlainAggregate",
    "PlainQuery",
    "RoundError",
    "RoundRecord",
    "RunResult",
    "attacker_client",
    "client_finalize",
    "client_round",
    "is_attacker",
    "make_keys",
    "metrics_csv",
    "run_cdp",
    "run_fedavg",
    "run_fedperm",
    "run_ldp",
    "server_round",
]

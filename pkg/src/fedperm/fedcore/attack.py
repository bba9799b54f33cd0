"""Model-poisoning harness: clients that inflate their update values."""

from __future__ import annotations

from dataclasses import replace

from fedperm.fedcore.config import FederationConfig
from fedperm.fedcore.protocol import ClientUpdateMsg


def is_attacker(client_id: int, config: FederationConfig) -> bool:
    """Clients ``0 .. attacker_count - 1`` are malicious."""
    return client_id < config.attacker_count


def attacker_client(msg: ClientUpdateMsg, scale: float) -> ClientUpdateMsg:
    """Scale the uploaded (pre-bounding) values by ``scale``; the query is kept."""
    if not scale > 0:
        raise ValueError("attack scale must be positive")
    if float(scale).is_integer():
        k = int(scale)
        values = tuple(v * k for v in msg.values)
    else:
        values = tuple(int(round(v * scale)) for v in msg.values)
    return replace(msg, values=values)

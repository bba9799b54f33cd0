from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Any

import numpy as np

from fedperm.privacy import BudgetSplit, PrivacyBudget, calibrate, invert_strong

ALGORITHMS = ("fedperm", "fedavg", "cdp", "ldp")
PIR_BACKENDS = ("paillier", "plaintext")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FederationConfig:
    """Everything a simulated run needs besides the data.

    ``eps_d = inf`` disables the Laplace randomizer. When ``eps_target`` is
    set and ``eps_d`` is left unset, ``eps_d`` is calibrated so the whole
    run spends at most ``(eps_target, delta_target)``; LDP-FL and CDP-FL
    derive their per-round budgets from the same target.
    """

    num_clients: int = 15
    clients_per_round: int = 15
    rounds: int = 10
    local_epochs: int = 1
    lr: float = 0.1
    batch_size: int = 32
    clip: float = 1.0
    norm_bound: float | str = math.inf  # number, inf, or "median"
    k1: int = 5
    k2: int = 1
    eps_d: float | None = None
    eps_target: float | None = None
    delta_target: float = 1e-5
    amplification_constant: float = 1.0
    frac_bits: int = 32
    key_bits: int = 2048
    pir_backend: str = "paillier"
    seed: int = 0
    threads: int = 1
    # baselines
    noise_multiplier: float = 0.0  # CDP-FL z
    sample_prob: float | None = None  # CDP-FL q; defaults to n / N
    fedavg_clip: bool = False
    # adversary
    attacker_count: int = 0
    attacker_scale: float = 1.0

    def __post_init__(self):
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ConfigError("need 1 <= clients_per_round <= num_clients")
        if self.rounds < 0 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("rounds >= 0, local_epochs >= 1 and batch_size >= 1 required")
        if not (self.lr >= 0 and self.clip > 0 and self.k1 >= 1 and self.k2 >= 1):
            raise ConfigError("lr >= 0, clip > 0, k1 >= 1, k2 >= 1 required")
        if isinstance(self.norm_bound, str):
            if self.norm_bound != "median":
                raise ConfigError("norm_bound must be a positive number, inf, or 'median'")
        elif not self.norm_bound > 0:
            raise ConfigError("norm_bound must be positive")
        if self.eps_d is not None and not self.eps_d > 0:
            raise ConfigError("eps_d must be positive")
        if self.pir_backend not in PIR_BACKENDS:
            raise ConfigError(f"pir_backend must be one of {PIR_BACKENDS}")
        if not 0 <= self.attacker_count <= self.num_clients:
            raise ConfigError("attacker_count out of range")
        if not 0 < self.delta_target < 1:
            raise ConfigError("delta_target must lie in (0, 1)")

    # ------------------------------------------------------------------

    def padded_dim(self, d: int) -> int:
        block = self.k1 * self.k2
        return -(-d // block) * block

    @property
    def split(self) -> BudgetSplit:
        return BudgetSplit.default(self.delta_target, max(self.rounds, 1))

    @property
    def q(self) -> float:
        return self.sample_prob if self.sample_prob is not None else self.clients_per_round / self.num_clients

    def resolved_eps_d(self, d: int) -> float:
        if self.eps_d is not None:
            return self.eps_d
        if self.eps_target is None:
            return math.inf
        return calibrate(
            self.eps_target,
            self.delta_target,
            max(self.rounds, 1),
            self.padded_dim(d),
            self.k1,
            self.k2,
            self.split,
            self.amplification_constant,
        )

    def budget(self, d: int) -> PrivacyBudget:
        return PrivacyBudget(
            eps_d=self.resolved_eps_d(d),
            d=self.padded_dim(d),
            k1=self.k1,
            k2=self.k2,
            delta_round=self.split.delta_round,
            delta_prime=self.split.delta_prime,
            rounds=self.rounds,
            constant=self.amplification_constant,
        )

    def round_epsilon(self) -> float:
        """Per-round epsilon whose strong composition meets ``eps_target``."""
        if self.eps_target is None:
            return math.inf
        return invert_strong(self.eps_target, max(self.rounds, 1), self.split.delta_prime)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, float) and math.isinf(v):
                out[k] = "inf"
        return out

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for a (seed, round, client, purpose) tuple."""
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def stream_int(seed: int, *keys: int) -> int:
    """128-bit integer seed for ``random.Random`` derived like :func:`stream`."""
    words = np.random.SeedSequence([seed, *keys]).generate_state(4, dtype=np.uint32)
    return int.from_bytes(b"".join(int(w).to_bytes(4, "big") for w in words), "big")


# purpose tags for stream()
TRAIN, NOISE, PATTERN, CRYPTO, SAMPLE, KEYS, INIT, PARTITION, SERVER_NOISE = range(9)

"""Plaintext baselines: FedAvg, CDP-FL and LDP-FL.

All three share the client sampling and local-training randomness of
:mod:`fedperm.fedcore.protocol`, so with noise switched off they follow
the same trajectory as FedPerm up to fixed-point quantisation.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from fedperm.datamodel import Dataset, DatasetShard, LogRegModel, evaluate, local_sgd
from fedperm.fedcore.config import NOISE, SERVER_NOISE, TRAIN, FederationConfig, stream
from fedperm.fedcore.protocol import local_delta, sample_clients
from fedperm.fedcore.records import RoundRecord, RunResult
from fedperm.privacy import compose_strong, gaussian_epsilon, gaussian_sigma

DeltaFn = Callable[[LogRegModel, DatasetShard, int, int], np.ndarray]


def _run(
    name: str,
    config: FederationConfig,
    shards: Sequence[DatasetShard],
    test: Dataset,
    init_model: LogRegModel | None,
    client_delta: DeltaFn,
    server_noise: Callable[[int, int], np.ndarray] | None = None,
    spent: Callable[[int], tuple[float, float]] = lambda t: (math.inf, 0.0),
    budget_cap: float = math.inf,
    keep_history: bool = False,
) -> RunResult:
    if len(shards) != config.num_clients:
        raise ValueError(f"expected {config.num_clients} shards, got {len(shards)}")
    model = init_model or LogRegModel.zeros(test.input_dim, test.num_classes)
    records: list[RoundRecord] = []
    history = [model.flatten()] if keep_history else []
    stopped = False
    for t in range(config.rounds):
        if spent(t)[0] > budget_cap:
            stopped = True
            break
        clients = sample_clients(config, t)
        deltas = [client_delta(model, shards[u], t, u) for u in clients]
        update = np.mean(deltas, axis=0)
        if server_noise is not None:
            update = update + server_noise(t, model.d)
        model = model.unflatten(model.flatten() + update)
        eps, delta = spent(t + 1)
        records.append(RoundRecord(t, tuple(clients), test_acc=evaluate(model, test), eps_spent=eps, delta_spent=delta))
        if keep_history:
            history.append(model.flatten())
    return RunResult(name, records, model.flatten(), history, stopped_early=stopped)


def run_fedavg(
    config: FederationConfig,
    shards: Sequence[DatasetShard],
    test: Dataset,
    init_model: LogRegModel | None = None,
    clip: bool | None = None,
    keep_history: bool = False,
) -> RunResult:
    """Plain mean of client deltas; ``clip`` clamps each delta to ``[-C, C]``."""
    do_clip = config.fedavg_clip if clip is None else clip

    def delta(model, shard, t, u):
        dlt = local_delta(model, shard, config, t, u)
        return np.clip(dlt, -config.clip, config.clip) if do_clip else dlt

    return _run("fedavg", config, shards, test, init_model, delta, keep_history=keep_history)


def ldp_sigma(config: FederationConfig, d: int) -> float:
    """Per-client Gaussian noise for one round at the per-round budget.

    An elementwise-clipped update lives in ``[-C, C]^d``, whose l2
    diameter ``2 C sqrt(d)`` is the sensitivity.
    """
    eps_round = config.round_epsilon()
    return gaussian_sigma(eps_round, config.split.delta_round, 2.0 * config.clip * math.sqrt(d))


def run_ldp(
    config: FederationConfig,
    shards: Sequence[DatasetShard],
    test: Dataset,
    init_model: LogRegModel | None = None,
    keep_history: bool = False,
) -> RunResult:
    d = (init_model.d if init_model else test.input_dim * test.num_classes + test.num_classes)
    sigma = ldp_sigma(config, d)
    eps_round = config.round_epsilon()
    split = config.split

    def delta(model, shard, t, u):
        dlt = np.clip(local_delta(model, shard, config, t, u), -config.clip, config.clip)
        if sigma > 0:
            dlt = dlt + stream(config.seed, t, u, NOISE).normal(0.0, sigma, size=dlt.shape)
        return dlt

    def spent(t):
        if t == 0:
            return 0.0, 0.0
        if math.isinf(eps_round):
            return math.inf, 0.0
        return compose_strong(eps_round, split.delta_round, t, split.delta_prime)

    result = _run("ldp", config, shards, test, init_model, delta, spent=spent, keep_history=keep_history)
    result.meta.update(sigma=sigma, eps_round=eps_round)
    return result


def cdp_sigma(config: FederationConfig) -> float:
    return config.noise_multiplier * config.clip / config.q


def cdp_round_epsilon(config: FederationConfig) -> float:
    """Gaussian-mechanism epsilon of one round; the mean of ``n`` l2-clipped
    updates moves by at most ``C / n`` when one client is swapped out."""
    sigma = cdp_sigma(config)
    return gaussian_epsilon(sigma, config.split.delta_round, config.clip / config.clients_per_round)


def _project_l2(anchor: LogRegModel, clip: float) -> Callable[[LogRegModel], LogRegModel]:
    base = anchor.flatten()

    def project(m: LogRegModel) -> LogRegModel:
        diff = m.flatten() - base
        norm = float(np.linalg.norm(diff))
        if norm <= clip:
            return m
        return anchor.unflatten(base + diff * (clip / norm))

    return project


def run_cdp(
    config: FederationConfig,
    shards: Sequence[DatasetShard],
    test: Dataset,
    init_model: LogRegModel | None = None,
    keep_history: bool = False,
) -> RunResult:
    """Trusted-server DP: l2-projected local updates, Gaussian noise on the mean.

    Stops before a round once the spent budget exceeds ``eps_target``.
    Accounting uses strong composition of per-round Gaussian guarantees.
    """
    sigma = cdp_sigma(config)
    eps_round = cdp_round_epsilon(config)
    split = config.split

    def delta(model, shard, t, u):
        rng = stream(config.seed, t, u, TRAIN)
        local = local_sgd(
            model, shard, config.lr, config.local_epochs, config.batch_size, rng, project=_project_l2(model, config.clip)
        )
        return local.flatten() - model.flatten()

    def noise(t, d):
        if sigma == 0:
            return np.zeros(d)
        return stream(config.seed, t, SERVER_NOISE).normal(0.0, sigma, size=d)

    def spent(t):
        if t == 0:
            return 0.0, 0.0
        if math.isinf(eps_round):
            return math.inf, 0.0
        return compose_strong(eps_round, split.delta_round, t, split.delta_prime)

    cap = config.eps_target if config.eps_target is not None else math.inf
    result = _run("cdp", config, shards, test, init_model, delta, noise, spent, cap, keep_history)
    result.meta.update(sigma=sigma, eps_round=eps_round)
    return result

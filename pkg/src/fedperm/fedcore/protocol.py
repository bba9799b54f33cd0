"""FedPerm rounds: LDP updates, intra-model shuffling, cPIR aggregation.

Message flow per round::

    client_round   local SGD -> clip/normalise -> Laplace -> shuffle -> encode
                   -> encrypted permutation masks       => ClientUpdateMsg
    server_round   norm bounding on shuffled values -> encrypted unshuffle-and-sum
                   (public key only)                    => EncryptedAggregate
    client_finalize decrypt -> average -> de-normalise -> strip padding -> update

The ``plaintext`` PIR backend runs the same flow with unencrypted masks.
It exists for desk-scale utility experiments where Paillier cost would
dominate; its aggregate is bit-identical to the decrypted Paillier one.
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from fedperm import pir
from fedperm.datamodel import Dataset, DatasetShard, LogRegModel, evaluate, local_sgd
from fedperm.fedcore.config import CRYPTO, KEYS, NOISE, PATTERN, SAMPLE, TRAIN, FederationConfig, stream, stream_int
from fedperm.fedcore.records import RoundRecord, RunResult
from fedperm.paillier import (
    FixedPointCodec,
    KeyMismatchError,
    PaillierKeypair,
    PaillierPublicKey,
    PaillierSecretKey,
    decrypt_many,
    keygen,
)
from fedperm.permute import ShuffleSpec, gen_spec, permutation_matrix, shuffle
from fedperm.pir import EncryptedAggregate, PirQuery, ProtocolError
from fedperm.privacy import clip_normalize, laplace_randomize

PAD_VALUE = 0.5  # normalised value of a zero update


class RoundError(RuntimeError):
    """A federation round failed; the original exception is ``__cause__``."""

    def __init__(self, round_index: int, cause: BaseException):
        super().__init__(f"round {round_index} failed: {cause}")
        self.round_index = round_index


@dataclass(frozen=True)
class PlainQuery:
    """Unencrypted stand-in for :class:`PirQuery` (plaintext backend)."""

    k1: int
    k2: int
    masks: np.ndarray  # (k2, k1, k1) binary

    @property
    def ciphertext_count(self) -> int:
        return 0

    @classmethod
    def from_spec(cls, spec: ShuffleSpec) -> PlainQuery:
        return cls(spec.k1, spec.k2, np.stack([permutation_matrix(p) for p in spec.patterns]))


@dataclass(frozen=True)
class PlainAggregate:
    values: tuple[int, ...]
    contributor_count: int

    def __len__(self) -> int:
        return len(self.values)


Query = Union[PirQuery, PlainQuery]
Aggregate = Union[EncryptedAggregate, PlainAggregate]


@dataclass(frozen=True)
class ClientUpdateMsg:
    client_id: int
    values: tuple[int, ...]  # shuffled, encoded, normalised update
    query: Query
    encrypt_ms: float = 0.0

    @property
    def d(self) -> int:
        return len(self.values)

    def wire_bytes(self) -> bytes:
        if not isinstance(self.query, PirQuery):
            raise ProtocolError("only Paillier queries have a wire encoding")
        return pir.encode_upload(self.values, self.query)

    def wire_size(self) -> int:
        if isinstance(self.query, PirQuery):
            return len(self.wire_bytes())
        return 8 * self.d + self.query.masks.size


def make_keys(config: FederationConfig) -> PaillierKeypair | None:
    if config.pir_backend != "paillier":
        return None
    return keygen(config.key_bits, random.Random(stream_int(config.seed, KEYS)))


def make_codec(config: FederationConfig, pk: PaillierPublicKey | None) -> FixedPointCodec:
    return FixedPointCodec(config.frac_bits, pk.n if pk is not None else None)


def sample_clients(config: FederationConfig, round_index: int) -> list[int]:
    rng = stream(config.seed, round_index, SAMPLE)
    chosen = rng.choice(config.num_clients, size=config.clients_per_round, replace=False)
    return sorted(int(u) for u in chosen)


def local_delta(
    global_model: LogRegModel, shard: Dataset | DatasetShard, config: FederationConfig, round_index: int, client_id: int
) -> np.ndarray:
    rng = stream(config.seed, round_index, client_id, TRAIN)
    local = local_sgd(global_model, shard, config.lr, config.local_epochs, config.batch_size, rng)
    return local.flatten() - global_model.flatten()


# --------------------------------------------------------------------------
# client


def client_round(
    global_model: LogRegModel,
    shard: Dataset | DatasetShard,
    config: FederationConfig,
    pk: PaillierPublicKey | None,
    *,
    round_index: int,
    client_id: int,
    eps_d: float,
    identity_patterns: bool = False,
) -> ClientUpdateMsg:
    d = global_model.d
    d_pad = config.padded_dim(d)
    delta = local_delta(global_model, shard, config, round_index, client_id)
    theta = np.full(d_pad, PAD_VALUE)
    theta[:d] = clip_normalize(delta, config.clip)
    # padding slots are noised too so they look like any other slot
    y = laplace_randomize(theta, eps_d, d, stream(config.seed, round_index, client_id, NOISE))
    if identity_patterns:
        spec = ShuffleSpec.identity(d_pad, config.k1, config.k2)
    else:
        spec = gen_spec(d_pad, config.k1, config.k2, stream(config.seed, round_index, client_id, PATTERN))
    codec = make_codec(config, pk)
    values = tuple(codec.encode_many(shuffle(y, spec), config.clients_per_round))

    start = time.perf_counter()
    if config.pir_backend == "paillier":
        if pk is None:
            raise ProtocolError("Paillier backend needs a public key")
        crypto_rng = random.Random(stream_int(config.seed, round_index, client_id, CRYPTO))
        query: Query = pir.build_query(pk, spec, crypto_rng)
    else:
        query = PlainQuery.from_spec(spec)
    enc_ms = (time.perf_counter() - start) * 1e3
    return ClientUpdateMsg(client_id, values, query, enc_ms)


# --------------------------------------------------------------------------
# server (public key only)


def _scale_values(values: Sequence[int], scale: float) -> tuple[int, ...]:
    # floor keeps the bounded norm at or below M
    return tuple(math.floor(v * scale) for v in values)


def encoded_norm(values: Sequence[int], codec: FixedPointCodec) -> float:
    return math.sqrt(sum(v * v for v in values)) / codec.scale


def norm_bound_messages(
    msgs: Sequence[ClientUpdateMsg], config: FederationConfig, codec: FixedPointCodec
) -> list[tuple[int, ...]]:
    """Server-side l2 bounding of every shuffled update to ``M``.

    The norm is computed exactly over the encoded integers, so it equals
    the norm of the unshuffled update.
    """
    norms = [encoded_norm(m.values, codec) for m in msgs]
    if config.norm_bound == "median":
        bound = float(np.median(norms))
    else:
        bound = float(config.norm_bound)
    out = []
    for m, norm in zip(msgs, norms):
        if math.isinf(bound) or norm <= bound or norm == 0:
            out.append(m.values)
        else:
            out.append(_scale_values(m.values, bound / norm))
    return out


def _plain_unshuffle_sum(queries: Sequence[PlainQuery], shuffled: Sequence[Sequence[int]]) -> tuple[int, ...]:
    d = len(shuffled[0])
    k1, k2 = queries[0].k1, queries[0].k2
    total = np.zeros(d, dtype=object)
    for q, y in zip(queries, shuffled):
        win = np.array(y, dtype=object).reshape(d // k1, k1)
        out = np.empty_like(win)
        for i in range(k2):
            # out_l = sum_j P[j, l] * y_j
            out[i::k2] = win[i::k2].dot(q.masks[i].astype(object))
        total = total + out.reshape(d)
    return tuple(int(v) for v in total)


def server_round(
    msgs: Sequence[ClientUpdateMsg], config: FederationConfig, pk: PaillierPublicKey | None
) -> Aggregate:
    if not msgs:
        raise ProtocolError("no client updates")
    d = msgs[0].d
    if any(m.d != d for m in msgs):
        raise ProtocolError("clients disagree on the model dimension")
    codec = make_codec(config, pk)
    bounded = norm_bound_messages(msgs, config, codec)
    queries = [m.query for m in msgs]
    if all(isinstance(q, PirQuery) for q in queries):
        if pk is None:
            raise ProtocolError("encrypted queries need the public key")
        return pir.unshuffle_aggregate(pk, queries, bounded, threads=config.threads)
    if all(isinstance(q, PlainQuery) for q in queries):
        if any((q.k1, q.k2) != (queries[0].k1, queries[0].k2) for q in queries):
            raise ProtocolError("clients disagree on (k1, k2)")
        return PlainAggregate(_plain_unshuffle_sum(queries, bounded), len(msgs))
    raise ProtocolError("mixed query backends in one round")


# --------------------------------------------------------------------------
# client finalize


def open_aggregate(agg: Aggregate, sk: PaillierSecretKey | None, d: int) -> list[int]:
    """Plaintext sums for the first ``d`` (non-padding) coordinates."""
    if isinstance(agg, EncryptedAggregate):
        if sk is None:
            raise ProtocolError("need the secret key to open an encrypted aggregate")
        if agg.key_id != sk.key_id:
            raise KeyMismatchError("aggregate was produced under a different key")
        return decrypt_many(sk, agg.values[:d])
    return list(agg.values[:d])


def client_finalize(
    agg: Aggregate,
    sk: PaillierSecretKey | None,
    global_model: LogRegModel,
    config: FederationConfig,
) -> LogRegModel:
    d = global_model.d
    codec = make_codec(config, sk.public if sk is not None else None)
    sums = open_aggregate(agg, sk, d)
    z = np.array(codec.decode_many(sums, agg.contributor_count, average=True))
    update = config.clip * (2.0 * z - 1.0)
    return global_model.unflatten(global_model.flatten() + update)


# --------------------------------------------------------------------------
# full run


def run_fedperm(
    config: FederationConfig,
    shards: Sequence[DatasetShard],
    test: Dataset,
    init_model: LogRegModel | None = None,
    keys: PaillierKeypair | None = None,
    keep_history: bool = False,
    identity_patterns: bool = False,
) -> RunResult:
    from fedperm.fedcore.attack import attacker_client, is_attacker

    if len(shards) != config.num_clients:
        raise ValueError(f"expected {config.num_clients} shards, got {len(shards)}")
    model = init_model or LogRegModel.zeros(test.input_dim, test.num_classes)
    if config.pir_backend == "paillier" and keys is None:
        keys = make_keys(config)
    pk = keys.public if keys is not None else None
    sk = keys.secret if keys is not None else None
    budget = config.budget(model.d)
    records: list[RoundRecord] = []
    history = [model.flatten()] if keep_history else []

    for t in range(config.rounds):
        try:
            clients = sample_clients(config, t)
            msgs = []
            for u in clients:
                msg = client_round(
                    model, shards[u], config, pk,
                    round_index=t, client_id=u, eps_d=budget.eps_d, identity_patterns=identity_patterns,
                )
                if is_attacker(u, config):
                    msg = attacker_client(msg, config.attacker_scale)
                msgs.append(msg)

            start = time.perf_counter()
            agg = server_round(msgs, config, pk)
            agg_ms = (time.perf_counter() - start) * 1e3

            start = time.perf_counter()
            model = client_finalize(agg, sk, model, config)
            dec_ms = (time.perf_counter() - start) * 1e3
        except Exception as exc:
            raise RoundError(t, exc) from exc

        eps, delta = budget.spent(t + 1)
        records.append(
            RoundRecord(
                round=t,
                client_ids=tuple(clients),
                enc_ms=float(np.mean([m.encrypt_ms for m in msgs])),
                agg_ms=agg_ms,
                dec_ms=dec_ms,
                test_acc=evaluate(model, test),
                eps_spent=eps,
                delta_spent=delta,
                enc_count=msgs[0].query.ciphertext_count,
                dec_count=model.d if isinstance(agg, EncryptedAggregate) else 0,
                upload_bytes=sum(m.wire_size() for m in msgs),
            )
        )
        if keep_history:
            history.append(model.flatten())

    meta = {"eps_d": budget.eps_d, "d": model.d, "padded_d": config.padded_dim(model.d)}
    return RunResult("fedperm", records, model.flatten(), history, meta=meta)

"""Computational PIR over Paillier: encrypted unshuffling and aggregation.

A client's query is its shuffle patterns as encrypted binary masks. The
server never learns the patterns: it raises each encrypted mask entry to
the corresponding shuffled value and multiplies, which yields encryptions
of the client's *unshuffled* values. Summing across clients gives an
encrypted aggregate that only secret-key holders can open.

Server-side functions accept a :class:`PaillierPublicKey` only.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fedperm import kernels
from fedperm.paillier import (
    Ciphertext,
    FixedPointCodec,
    KeyMismatchError,
    PaillierPublicKey,
    PaillierSecretKey,
    RandomSource,
    decrypt_many,
    encrypt_many,
)
from fedperm.permute import ShuffleSpec, permutation_matrix

PROTOCOL_VERSION = 1


class ProtocolError(Exception):
    """Clients disagree on geometry or keys, or a message is malformed."""


@dataclass(frozen=True)
class PirQuery:
    """``k2`` encrypted ``k1 x k1`` permutation masks, stored row-major.

    ``matrices[i][j * k1 + l]`` encrypts 1 iff pattern ``i`` maps slot
    ``j`` to source slot ``l`` (both 0-indexed).
    """

    k1: int
    k2: int
    matrices: tuple[tuple[int, ...], ...]
    public: PaillierPublicKey

    @property
    def key_id(self) -> str:
        return self.public.key_id

    @property
    def ciphertext_count(self) -> int:
        return sum(len(m) for m in self.matrices)

    def ciphertext(self, i: int, j: int, l: int) -> Ciphertext:
        return Ciphertext(self.matrices[i][j * self.k1 + l], self.public)


@dataclass(frozen=True)
class EncryptedAggregate:
    values: tuple[int, ...]
    contributor_count: int
    public: PaillierPublicKey

    @property
    def key_id(self) -> str:
        return self.public.key_id

    def __len__(self) -> int:
        return len(self.values)


def build_query(pk: PaillierPublicKey, spec: ShuffleSpec, rng: RandomSource | None = None) -> PirQuery:
    bits = [int(b) for pi in spec.patterns for b in permutation_matrix(pi).ravel()]
    flat = encrypt_many(pk, bits, rng)
    size = spec.k1 * spec.k1
    matrices = tuple(tuple(flat[i * size : (i + 1) * size]) for i in range(spec.k2))
    return PirQuery(spec.k1, spec.k2, matrices, pk)


def respond_single(query_row: Sequence[Ciphertext], db: Sequence[int]) -> Ciphertext:
    """Encrypted dot product of one mask row with a plaintext database."""
    if len(query_row) != len(db):
        raise ValueError(f"query row has {len(query_row)} entries, database {len(db)}")
    if not query_row:
        raise ValueError("empty query")
    pk = query_row[0].public
    if any(c.key_id != pk.key_id for c in query_row):
        raise KeyMismatchError("query row mixes keys")
    acc = 1
    for c, v in zip(query_row, db):
        if v < 0:
            raise ValueError("database entries must be non-negative integers")
        if v:
            acc = acc * pow(c.value, v, pk.nsq) % pk.nsq
    return Ciphertext(acc, pk)


def _group_slices(d: int, k1: int, k2: int) -> list[np.ndarray]:
    """Flat parameter indices of every pattern group, window-major."""
    windows = np.arange(d).reshape(d // k1, k1)
    return [windows[i::k2].ravel() for i in range(k2)]


def _client_unshuffle(query: PirQuery, shuffled: Sequence[int], d: int, acc: list[int] | None) -> list[int]:
    nsq = query.public.nsq
    out = list(acc) if acc is not None else [1] * d
    vals = list(shuffled)
    for i, idx in enumerate(_group_slices(d, query.k1, query.k2)):
        group_vals = [vals[t] for t in idx]
        group_acc = [out[t] for t in idx]
        res = kernels.apply_windows(list(query.matrices[i]), group_vals, group_acc, query.k1, nsq)
        for t, v in zip(idx, res):
            out[t] = v
    return out


def apply_query(query: PirQuery, shuffled: Sequence[int]) -> list[int]:
    """Encrypted unshuffle of a single client's encoded values."""
    d = len(shuffled)
    if d % (query.k1 * query.k2):
        raise ProtocolError(f"d = {d} is not a multiple of k1*k2 = {query.k1 * query.k2}")
    return _client_unshuffle(query, shuffled, d, None)


def unshuffle_aggregate(
    pk: PaillierPublicKey,
    queries: Sequence[PirQuery],
    shuffled: Sequence[Sequence[int]],
    threads: int = 1,
) -> EncryptedAggregate:
    """Encrypted sum over clients of their unshuffled encoded vectors.

    Division by the client count is left to the decrypting side. The
    result is identical for any ``threads`` because the per-client
    products are combined in client order.
    """
    if not queries or len(queries) != len(shuffled):
        raise ProtocolError("need one query per shuffled vector and at least one client")
    d = len(shuffled[0])
    k1, k2 = queries[0].k1, queries[0].k2
    for q, y in zip(queries, shuffled):
        if q.key_id != pk.key_id:
            raise ProtocolError("query encrypted under a different public key")
        if (q.k1, q.k2) != (k1, k2) or len(y) != d:
            raise ProtocolError("clients disagree on (d, k1, k2)")
        if any(len(m) != k1 * k1 for m in q.matrices) or len(q.matrices) != k2:
            raise ProtocolError("malformed query")
    if d % (k1 * k2):
        raise ProtocolError(f"d = {d} is not a multiple of k1*k2 = {k1 * k2}")

    if threads <= 1:
        acc: list[int] | None = None
        for q, y in zip(queries, shuffled):
            acc = _client_unshuffle(q, y, d, acc)
        total = acc
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda qy: _client_unshuffle(qy[0], qy[1], d, None), zip(queries, shuffled)))
        nsq = pk.nsq
        total = parts[0]
        for part in parts[1:]:
            total = [a * b % nsq for a, b in zip(total, part)]
    return EncryptedAggregate(tuple(total), len(queries), pk)


def decrypt_aggregate(sk: PaillierSecretKey, agg: EncryptedAggregate) -> list[int]:
    if agg.key_id != sk.key_id:
        raise KeyMismatchError("aggregate was produced under a different key")
    return decrypt_many(sk, agg.values)


def recover(
    sk: PaillierSecretKey,
    agg: EncryptedAggregate,
    codec: FixedPointCodec,
    clip: float,
) -> np.ndarray:
    """Decrypt, average, and map ``[0, 1]`` values back to ``[-clip, clip]``."""
    plain = decrypt_aggregate(sk, agg)
    z = np.array(codec.decode_many(plain, agg.contributor_count, average=True))
    return clip * (2.0 * z - 1.0)


# --------------------------------------------------------------------------
# client upload wire format
#
# b"FPUP" | u16 version | u32 d | u32 k1 | u32 k2 | 8-byte key id
# | d x u64 encoded values | k2*k1*k1 x (u32 length | ciphertext bytes)
# All integers big-endian.

_UPLOAD_MAGIC = b"FPUP"
_HEADER = struct.Struct(">4sHIII8s")


def encode_upload(values: Sequence[int], query: PirQuery) -> bytes:
    parts = [
        _HEADER.pack(
            _UPLOAD_MAGIC, PROTOCOL_VERSION, len(values), query.k1, query.k2, bytes.fromhex(query.key_id)
        )
    ]
    try:
        parts.append(struct.pack(f">{len(values)}Q", *values))
    except struct.error as exc:
        raise ProtocolError(f"encoded value does not fit in 8 bytes: {exc}") from exc
    for mat in query.matrices:
        for c in mat:
            raw = c.to_bytes((c.bit_length() + 7) // 8 or 1, "big")
            parts.append(struct.pack(">I", len(raw)))
            parts.append(raw)
    return b"".join(parts)


def decode_upload(buf: bytes, pk: PaillierPublicKey) -> tuple[list[int], PirQuery]:
    if len(buf) < _HEADER.size:
        raise ProtocolError("truncated upload header")
    magic, version, d, k1, k2, key_id = _HEADER.unpack_from(buf, 0)
    if magic != _UPLOAD_MAGIC:
        raise ProtocolError(f"bad upload magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if key_id.hex() != pk.key_id:
        raise ProtocolError("upload was encrypted under a different public key")
    off = _HEADER.size
    if off + 8 * d > len(buf):
        raise ProtocolError(f"truncated value block at byte {off}")
    values = list(struct.unpack_from(f">{d}Q", buf, off))
    off += 8 * d
    flat = []
    for _ in range(k2 * k1 * k1):
        if off + 4 > len(buf):
            raise ProtocolError(f"truncated ciphertext at byte {off}")
        (length,) = struct.unpack_from(">I", buf, off)
        off += 4
        if off + length > len(buf):
            raise ProtocolError(f"truncated ciphertext at byte {off}")
        flat.append(int.from_bytes(buf[off : off + length], "big"))
        off += length
    if off != len(buf):
        raise ProtocolError(f"trailing bytes after upload at byte {off}")
    size = k1 * k1
    matrices = tuple(tuple(flat[i * size : (i + 1) * size]) for i in range(k2))
    return values, PirQuery(k1, k2, matrices, pk)

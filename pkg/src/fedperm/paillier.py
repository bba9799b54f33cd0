"""Paillier additively homomorphic encryption and a fixed-point codec.

Keys use the simplified generator ``g = n + 1``. Encryption is
``c = (1 + m*n) * r**n mod n**2`` and decryption uses the CRT over
``p**2`` and ``q**2``. All randomness comes from an explicitly passed
``random.Random``-compatible source so keys and ciphertext streams are
reproducible under a seed.
"""

from __future__ import annotations

import hashlib
import math
import random
import secrets
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Protocol, Sequence

from fedperm import kernels

MIN_KEY_BITS = 512
DEFAULT_KEY_BITS = 2048
MILLER_RABIN_ROUNDS = 64

_SMALL_PRIMES = [p for p in range(3, 2000) if all(p % d for d in range(2, int(p**0.5) + 1))]


class PaillierError(Exception):
    """Base class for errors raised by this module."""


class ParameterError(PaillierError, ValueError):
    """An argument is outside the domain the operation accepts."""


class KeyMismatchError(PaillierError):
    """Ciphertexts or keys from different keypairs were combined."""


class EncodingError(PaillierError, ValueError):
    """A value cannot be represented in the plaintext ring without overflow."""


class RandomSource(Protocol):
    def getrandbits(self, k: int) -> int: ...

    def randrange(self, start: int, stop: int | None = ..., step: int = ...) -> int: ...


def _system_rng() -> RandomSource:
    return secrets.SystemRandom()


# --------------------------------------------------------------------------
# primes


def is_probable_prime(n: int, rng: RandomSource, rounds: int = MILLER_RABIN_ROUNDS) -> bool:
    """Miller-Rabin with ``rounds`` bases drawn from ``rng``."""
    if n < 3:
        return n == 2
    for p in _SMALL_PRIMES:
        if n == p:
            return True
        if n % p == 0:
            return False
    if n % 2 == 0:
        return False
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = pow(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def random_prime(bits: int, rng: RandomSource) -> int:
    """Random prime with exactly ``bits`` bits and its top two bits set."""
    while True:
        candidate = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
        if is_probable_prime(candidate, rng):
            return candidate


# --------------------------------------------------------------------------
# keys


@dataclass(frozen=True)
class PaillierPublicKey:
    n: int
    key_bits: int

    @property
    def g(self) -> int:
        return self.n + 1

    @cached_property
    def nsq(self) -> int:
        return self.n * self.n

    @cached_property
    def key_id(self) -> str:
        h = hashlib.sha256(self.n.to_bytes((self.n.bit_length() + 7) // 8, "big"))
        return h.hexdigest()[:16]

    def __repr__(self) -> str:
        return f"PaillierPublicKey(key_bits={self.key_bits}, key_id={self.key_id})"

    def random_nonce(self, rng: RandomSource) -> int:
        while True:
            r = rng.randrange(1, self.n)
            if math.gcd(r, self.n) == 1:
                return r

    def encrypt(self, m: int, rng: RandomSource | None = None) -> Ciphertext:
        return encrypt(self, m, rng)


@dataclass(frozen=True)
class PaillierSecretKey:
    public: PaillierPublicKey
    p: int
    q: int

    @cached_property
    def lam(self) -> int:
        return math.lcm(self.p - 1, self.q - 1)

    @cached_property
    def mu(self) -> int:
        return pow(self.lam, -1, self.public.n)

    @cached_property
    def _crt(self) -> tuple[int, int, int]:
        p, q, g = self.p, self.q, self.public.g
        hp = pow((pow(g, p - 1, p * p) - 1) // p, -1, p)
        hq = pow((pow(g, q - 1, q * q) - 1) // q, -1, q)
        return hp, hq, pow(p, -1, q)

    @property
    def key_id(self) -> str:
        return self.public.key_id

    def __repr__(self) -> str:
        return f"PaillierSecretKey(key_id={self.key_id})"

    def decrypt(self, c: Ciphertext) -> int:
        return decrypt(self, c)


@dataclass(frozen=True)
class PaillierKeypair:
    public: PaillierPublicKey
    secret: PaillierSecretKey

    @property
    def n(self) -> int:
        return self.public.n

    @property
    def g(self) -> int:
        return self.public.g

    @property
    def key_bits(self) -> int:
        return self.public.key_bits


def keygen(key_bits: int = DEFAULT_KEY_BITS, rng: RandomSource | None = None) -> PaillierKeypair:
    """Generate a keypair whose modulus has exactly ``key_bits`` bits."""
    if key_bits < MIN_KEY_BITS:
        raise ParameterError(f"key_bits must be >= {MIN_KEY_BITS}, got {key_bits}")
    if key_bits % 2:
        raise ParameterError("key_bits must be even")
    rng = rng or _system_rng()
    half = key_bits // 2
    while True:
        p = random_prime(half, rng)
        q = random_prime(half, rng)
        if p == q:
            continue
        n = p * q
        # top-two-bits-set primes guarantee the bit length, checked anyway
        if n.bit_length() != key_bits or math.gcd(n, (p - 1) * (q - 1)) != 1:
            continue
        if p > q:
            p, q = q, p
        pk = PaillierPublicKey(n=n, key_bits=key_bits)
        return PaillierKeypair(public=pk, secret=PaillierSecretKey(pk, p, q))


# --------------------------------------------------------------------------
# ciphertexts


@dataclass(frozen=True)
class Ciphertext:
    """A Paillier ciphertext bound to the public key that produced it.

    Supports ``c1 + c2`` (plaintext addition) and ``c * k`` (plaintext
    scalar multiplication by a non-negative integer).
    """

    value: int
    public: PaillierPublicKey = field(repr=False)

    @property
    def key_id(self) -> str:
        return self.public.key_id

    def __add__(self, other: Ciphertext) -> Ciphertext:
        return add(self, other)

    def __mul__(self, k: int) -> Ciphertext:
        return scalar_mul(self, k)

    __rmul__ = __mul__


def encrypt(pk: PaillierPublicKey, m: int, rng: RandomSource | None = None) -> Ciphertext:
    if not 0 <= m < pk.n:
        raise ParameterError("plaintext must lie in [0, n)")
    rng = rng or _system_rng()
    r = pk.random_nonce(rng)
    return Ciphertext((1 + m * pk.n) * pow(r, pk.n, pk.nsq) % pk.nsq, pk)


def encrypt_many(
    pk: PaillierPublicKey, messages: Sequence[int], rng: RandomSource | None = None
) -> list[int]:
    """Encrypt a batch, returning raw ciphertext integers (hot path)."""
    if any(not 0 <= m < pk.n for m in messages):
        raise ParameterError("plaintext must lie in [0, n)")
    rng = rng or _system_rng()
    nonces = [pk.random_nonce(rng) for _ in messages]
    return kernels.encrypt_batch(list(messages), nonces, pk.n, pk.nsq)


def decrypt(sk: PaillierSecretKey, c: Ciphertext) -> int:
    if c.key_id != sk.key_id:
        raise KeyMismatchError("ciphertext was produced under a different key")
    return decrypt_many(sk, [c.value])[0]


def decrypt_many(sk: PaillierSecretKey, values: Sequence[int]) -> list[int]:
    """Decrypt raw ciphertext integers with the CRT kernel."""
    hp, hq, p_inv_q = sk._crt
    return kernels.decrypt_batch(list(values), sk.p, sk.q, hp, hq, p_inv_q)


def add(c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    if c1.key_id != c2.key_id:
        raise KeyMismatchError("cannot add ciphertexts from different keys")
    return Ciphertext(c1.value * c2.value % c1.public.nsq, c1.public)


def scalar_mul(c: Ciphertext, k: int) -> Ciphertext:
    if k < 0:
        raise ParameterError("scalar must be non-negative")
    if k >= c.public.n:
        raise ParameterError("scalar must be < n")
    return Ciphertext(pow(c.value, k, c.public.nsq), c.public)


# --------------------------------------------------------------------------
# fixed point


@dataclass(frozen=True)
class FixedPointCodec:
    """Round-to-nearest fixed point with ``frac_bits`` fractional bits.

    Only non-negative reals are encoded; callers normalise into ``[0, 1]``
    first. When ``modulus`` is given, :meth:`encode` checks that
    ``accumulated_count`` encoded values can be summed without wrapping.
    """

    frac_bits: int = 32
    modulus: int | None = None

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    def max_value(self, accumulated_count: int = 1) -> float:
        if self.modulus is None:
            return math.inf
        return ((self.modulus - 1) // accumulated_count) / self.scale

    def encode(self, x: float, accumulated_count: int = 1) -> int:
        if not math.isfinite(x):
            raise EncodingError(f"cannot encode non-finite value {x!r}")
        if x < 0:
            raise EncodingError(f"negative value {x!r}; normalise before encoding")
        v = round(x * self.scale)
        if self.modulus is not None and v * accumulated_count >= self.modulus:
            raise EncodingError(
                f"{x!r} summed {accumulated_count} times overflows the plaintext ring"
            )
        return v

    def encode_many(self, xs: Iterable[float], accumulated_count: int = 1) -> list[int]:
        return [self.encode(float(x), accumulated_count) for x in xs]

    def decode(self, v: int, accumulated_count: int = 1, average: bool = False) -> float:
        """Back to a real; divides by ``accumulated_count`` when ``average``."""
        if self.modulus is not None and not 0 <= v < self.modulus:
            raise EncodingError("encoded value outside the plaintext ring")
        divisor = self.scale * (accumulated_count if average else 1)
        return v / divisor

    def decode_many(
        self, vs: Iterable[int], accumulated_count: int = 1, average: bool = False
    ) -> list[float]:
        return [self.decode(v, accumulated_count, average) for v in vs]


# --------------------------------------------------------------------------
# serialization
#
# Public key:  b"FPPK" | u32 version | field(key_bits) | field(n) | field(g)
# Secret key:  b"FPSK" | u32 version | field(key_bits) | field(n) | field(g)
#                                    | field(p) | field(q)
# field(x):    u32 byte length L (big-endian) | L bytes of x, big-endian

_PK_MAGIC = b"FPPK"
_SK_MAGIC = b"FPSK"
_FORMAT_VERSION = 1


def _pack_int(x: int) -> bytes:
    raw = x.to_bytes(max(1, (x.bit_length() + 7) // 8), "big")
    return struct.pack(">I", len(raw)) + raw


def _unpack_ints(buf: bytes, offset: int, count: int) -> list[int]:
    out = []
    for _ in range(count):
        if offset + 4 > len(buf):
            raise PaillierError(f"truncated key data at byte {offset}")
        (length,) = struct.unpack_from(">I", buf, offset)
        offset += 4
        if offset + length > len(buf):
            raise PaillierError(f"truncated key data at byte {offset}")
        out.append(int.from_bytes(buf[offset : offset + length], "big"))
        offset += length
    if offset != len(buf):
        raise PaillierError(f"trailing bytes after key data at byte {offset}")
    return out


def serialize_public_key(pk: PaillierPublicKey) -> bytes:
    header = _PK_MAGIC + struct.pack(">I", _FORMAT_VERSION)
    return header + b"".join(_pack_int(x) for x in (pk.key_bits, pk.n, pk.g))


def serialize_secret_key(sk: PaillierSecretKey) -> bytes:
    pk = sk.public
    header = _SK_MAGIC + struct.pack(">I", _FORMAT_VERSION)
    return header + b"".join(_pack_int(x) for x in (pk.key_bits, pk.n, pk.g, sk.p, sk.q))


def _check_header(buf: bytes, magic: bytes) -> None:
    if buf[:4] != magic:
        raise PaillierError(f"bad key magic {buf[:4]!r}, expected {magic!r}")
    (version,) = struct.unpack_from(">I", buf, 4)
    if version != _FORMAT_VERSION:
        raise PaillierError(f"unsupported key format version {version}")


def deserialize_public_key(buf: bytes) -> PaillierPublicKey:
    _check_header(buf, _PK_MAGIC)
    key_bits, n, g = _unpack_ints(buf, 8, 3)
    if g != n + 1:
        raise PaillierError("only g = n + 1 keys are supported")
    return PaillierPublicKey(n=n, key_bits=key_bits)


def deserialize_secret_key(buf: bytes) -> PaillierKeypair:
    _check_header(buf, _SK_MAGIC)
    key_bits, n, g, p, q = _unpack_ints(buf, 8, 5)
    if p * q != n or g != n + 1:
        raise PaillierError("inconsistent secret key data")
    pk = PaillierPublicKey(n=n, key_bits=key_bits)
    return PaillierKeypair(pk, PaillierSecretKey(pk, p, q))


def seeded_rng(seed: int) -> random.Random:
    """Deterministic randomness source for reproducible runs and tests."""
    return random.Random(seed)

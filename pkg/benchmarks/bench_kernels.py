"""Compare the compiled GMP kernels with the pure-Python fallback.

    python benchmarks/bench_kernels.py [--key-bits 1024] [--k1 20] [--windows 40]

Prints one line per kernel with the time of each backend and the speedup,
after checking the two backends agree bit-for-bit.
"""

from __future__ import annotations

import argparse
import random
import time

from fedperm import _kernels_py
from fedperm.paillier import keygen, seeded_rng
from fedperm.permute import ShuffleSpec, permutation_matrix

try:
    from fedperm import _kernels as _kernels_gmp
except ImportError:  # pragma: no cover
    _kernels_gmp = None


def _time(fn, *args, repeat: int = 3):
    best, out = float("inf"), None
    for _ in range(repeat):
        start = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - start)
    return best, out


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--key-bits", type=int, default=1024)
    ap.add_argument("--k1", type=int, default=20)
    ap.add_argument("--windows", type=int, default=40)
    ap.add_argument("--count", type=int, default=400, help="batch size for encrypt/decrypt")
    args = ap.parse_args(argv)

    if _kernels_gmp is None:
        print("compiled kernels not built; only the fallback is available")
        return

    rng = seeded_rng(1)
    kp = keygen(args.key_bits, rng)
    pk, sk = kp.public, kp.secret
    r = random.Random(2)
    ms = [r.getrandbits(40) for _ in range(args.count)]
    nonces = [pk.random_nonce(r) for _ in range(args.count)]

    k1 = args.k1
    spec = ShuffleSpec.from_patterns(k1 * args.windows, [tuple(r.sample(range(1, k1 + 1), k1))])
    bits = [int(b) for b in permutation_matrix(spec.patterns[0]).ravel()]
    matrix = _kernels_gmp.encrypt_batch(bits, [pk.random_nonce(r) for _ in bits], pk.n, pk.nsq)
    values = [r.getrandbits(33) for _ in range(k1 * args.windows)]
    acc = [1] * len(values)
    hp, hq, pinv = sk._crt

    cases = [
        ("encrypt_batch", (ms, nonces, pk.n, pk.nsq)),
        ("apply_windows", (matrix, values, acc, k1, pk.nsq)),
        ("decrypt_batch", (_kernels_gmp.encrypt_batch(ms, nonces, pk.n, pk.nsq), sk.p, sk.q, hp, hq, pinv)),
    ]
    print(f"key_bits={args.key_bits} k1={k1} windows={args.windows} count={args.count}")
    print(f"{'kernel':<16}{'python s':>12}{'gmp s':>12}{'speedup':>10}")
    for name, call_args in cases:
        t_py, out_py = _time(getattr(_kernels_py, name), *call_args, repeat=1)
        t_c, out_c = _time(getattr(_kernels_gmp, name), *call_args)
        if out_py != out_c:
            raise SystemExit(f"{name}: backends disagree")
        print(f"{name:<16}{t_py:>12.4f}{t_c:>12.4f}{t_py / t_c:>9.1f}x")


if __name__ == "__main__":
    main()

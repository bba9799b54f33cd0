"""Pure-Python twins of the GMP kernels in ``_kernels.pyx``.

Used when the compiled extension is not importable. Outputs are
bit-identical to the compiled versions.
"""

from __future__ import annotations

BACKEND = "python"


def encrypt_batch(plaintexts: list[int], nonces: list[int], n: int, nsq: int) -> list[int]:
    if len(plaintexts) != len(nonces):
        raise ValueError("plaintexts and nonces differ in length")
    return [(1 + m * n) * pow(r, n, nsq) % nsq for m, r in zip(plaintexts, nonces)]


def apply_windows(
    matrix: list[int], values: list[int], acc: list[int], k1: int, nsq: int
) -> list[int]:
    total = len(values)
    if len(matrix) != k1 * k1:
        raise ValueError("matrix must hold k1*k1 ciphertexts")
    if total % k1 != 0 or len(acc) != total:
        raise ValueError("values/acc length must be a common multiple of k1")
    out = list(acc)
    for o in range(0, total, k1):
        window = values[o : o + k1]
        for l in range(k1):
            t = 1
            for j, v in enumerate(window):
                if v:
                    t = t * pow(matrix[j * k1 + l], v, nsq) % nsq
            out[o + l] = out[o + l] * t % nsq
    return out


def decrypt_batch(
    ciphertexts: list[int], p: int, q: int, hp: int, hq: int, p_inv_q: int
) -> list[int]:
    psq, qsq = p * p, q * q
    out = []
    for c in ciphertexts:
        mp = (pow(c % psq, p - 1, psq) - 1) // p * hp % p
        mq = (pow(c % qsq, q - 1, qsq) - 1) // q * hq % q
        out.append(mp + p * ((mq - mp) * p_inv_q % q))
    return out

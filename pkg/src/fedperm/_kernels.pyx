# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""GMP-backed batch kernels for the Paillier hot loops.

Every function here has a twin in ``_kernels_py`` with the same signature
and bit-identical output. Python ints are marshalled to ``mpz_t`` once per
call; the arithmetic itself runs with the GIL released.
"""

from libc.stdlib cimport malloc, free
from libc.string cimport memcpy
from cpython.bytes cimport PyBytes_FromStringAndSize, PyBytes_AS_STRING


cdef extern from "gmp.h":
    ctypedef struct __mpz_struct:
        pass
    ctypedef __mpz_struct* mpz_ptr
    void mpz_init(mpz_ptr) nogil
    void mpz_clear(mpz_ptr) nogil
    void mpz_set(mpz_ptr, mpz_ptr) nogil
    void mpz_set_ui(mpz_ptr, unsigned long) nogil
    int mpz_sgn(mpz_ptr) nogil
    void mpz_add_ui(mpz_ptr, mpz_ptr, unsigned long) nogil
    void mpz_sub(mpz_ptr, mpz_ptr, mpz_ptr) nogil
    void mpz_sub_ui(mpz_ptr, mpz_ptr, unsigned long) nogil
    void mpz_mul(mpz_ptr, mpz_ptr, mpz_ptr) nogil
    void mpz_add(mpz_ptr, mpz_ptr, mpz_ptr) nogil
    void mpz_mod(mpz_ptr, mpz_ptr, mpz_ptr) nogil
    void mpz_tdiv_q(mpz_ptr, mpz_ptr, mpz_ptr) nogil
    void mpz_powm(mpz_ptr, mpz_ptr, mpz_ptr, mpz_ptr) nogil
    size_t mpz_sizeinbase(mpz_ptr, int) nogil
    void mpz_import(mpz_ptr, size_t, int, size_t, int, size_t, const void*) nogil
    void* mpz_export(void*, size_t*, int, size_t, int, size_t, mpz_ptr) nogil


BACKEND = "gmp"


cdef class _MpzArray:
    cdef __mpz_struct* data
    cdef Py_ssize_t size

    def __cinit__(self, Py_ssize_t size):
        cdef Py_ssize_t i
        self.size = 0
        self.data = <__mpz_struct*> malloc(max(size, 1) * sizeof(__mpz_struct))
        if self.data == NULL:
            raise MemoryError()
        for i in range(size):
            mpz_init(&self.data[i])
        self.size = size

    def __dealloc__(self):
        cdef Py_ssize_t i
        if self.data != NULL:
            for i in range(self.size):
                mpz_clear(&self.data[i])
            free(self.data)


cdef int _load(mpz_ptr z, object v) except -1:
    if v < 0:
        raise ValueError("kernels operate on non-negative integers")
    if v < 18446744073709551616:
        mpz_set_ui(z, <unsigned long> v)
        return 0
    cdef bytes b = v.to_bytes((v.bit_length() + 7) // 8, "big")
    mpz_import(z, len(b), 1, 1, 1, 0, PyBytes_AS_STRING(b))
    return 0


cdef object _store(mpz_ptr z):
    cdef size_t count = 0
    cdef size_t nbytes = (mpz_sizeinbase(z, 2) + 7) // 8
    cdef bytes buf = PyBytes_FromStringAndSize(NULL, nbytes)
    mpz_export(PyBytes_AS_STRING(buf), &count, 1, 1, 1, 0, z)
    return int.from_bytes(buf[:count], "big")


cdef _MpzArray _load_list(list values):
    cdef Py_ssize_t i, m = len(values)
    cdef _MpzArray arr = _MpzArray(m)
    for i in range(m):
        _load(&arr.data[i], values[i])
    return arr


cdef list _store_list(_MpzArray arr):
    cdef Py_ssize_t i
    return [_store(&arr.data[i]) for i in range(arr.size)]


def encrypt_batch(list plaintexts, list nonces, object n, object nsq):
    """Return ``[(1 + m*n) * r**n mod n**2]`` for paired plaintexts and nonces."""
    if len(plaintexts) != len(nonces):
        raise ValueError("plaintexts and nonces differ in length")
    cdef Py_ssize_t i, m = len(plaintexts)
    cdef _MpzArray ms = _load_list(plaintexts)
    cdef _MpzArray rs = _load_list(nonces)
    cdef _MpzArray mod = _load_list([n, nsq])
    cdef _MpzArray tmp = _MpzArray(1)
    with nogil:
        for i in range(m):
            mpz_powm(&rs.data[i], &rs.data[i], &mod.data[0], &mod.data[1])
            mpz_mul(&tmp.data[0], &ms.data[i], &mod.data[0])
            mpz_add_ui(&tmp.data[0], &tmp.data[0], 1)
            mpz_mul(&rs.data[i], &rs.data[i], &tmp.data[0])
            mpz_mod(&rs.data[i], &rs.data[i], &mod.data[1])
    return _store_list(rs)


def apply_windows(list matrix, list values, list acc, Py_ssize_t k1, object nsq):
    """Multiply every k1-window of ``values`` through an encrypted k1 x k1 mask.

    ``matrix[j*k1 + l]`` is applied as ``out[o+l] = prod_j matrix[j, l] ** values[o+j]``
    and the result is multiplied into ``acc`` (mod ``nsq``). Returns the new
    accumulator list; the inputs are not modified.
    """
    cdef Py_ssize_t total = len(values)
    if len(matrix) != k1 * k1:
        raise ValueError("matrix must hold k1*k1 ciphertexts")
    if total % k1 != 0 or len(acc) != total:
        raise ValueError("values/acc length must be a common multiple of k1")
    cdef _MpzArray mat = _load_list(matrix)
    cdef _MpzArray vals = _load_list(values)
    cdef _MpzArray out = _load_list(acc)
    cdef _MpzArray mod = _load_list([nsq])
    cdef _MpzArray tmp = _MpzArray(2)
    cdef Py_ssize_t o, j, l
    with nogil:
        o = 0
        while o < total:
            for l in range(k1):
                mpz_set_ui(&tmp.data[0], 1)
                for j in range(k1):
                    if mpz_sgn(&vals.data[o + j]) == 0:
                        continue
                    mpz_powm(&tmp.data[1], &mat.data[j * k1 + l], &vals.data[o + j], &mod.data[0])
                    mpz_mul(&tmp.data[0], &tmp.data[0], &tmp.data[1])
                    mpz_mod(&tmp.data[0], &tmp.data[0], &mod.data[0])
                mpz_mul(&out.data[o + l], &out.data[o + l], &tmp.data[0])
                mpz_mod(&out.data[o + l], &out.data[o + l], &mod.data[0])
            o += k1
    return _store_list(out)


def decrypt_batch(list ciphertexts, object p, object q, object hp, object hq, object p_inv_q):
    """CRT Paillier decryption (g = n + 1) of a list of ciphertexts."""
    cdef Py_ssize_t i, m = len(ciphertexts)
    cdef _MpzArray cs = _load_list(ciphertexts)
    # consts: p, q, p^2, q^2, p-1, q-1, hp, hq, p^-1 mod q
    cdef _MpzArray k = _load_list([p, q, p * p, q * q, p - 1, q - 1, hp, hq, p_inv_q])
    cdef _MpzArray tmp = _MpzArray(2)
    with nogil:
        for i in range(m):
            # m_p = L_p(c^(p-1) mod p^2) * hp mod p
            mpz_mod(&tmp.data[0], &cs.data[i], &k.data[2])
            mpz_powm(&tmp.data[0], &tmp.data[0], &k.data[4], &k.data[2])
            mpz_sub_ui(&tmp.data[0], &tmp.data[0], 1)
            mpz_tdiv_q(&tmp.data[0], &tmp.data[0], &k.data[0])
            mpz_mul(&tmp.data[0], &tmp.data[0], &k.data[6])
            mpz_mod(&tmp.data[0], &tmp.data[0], &k.data[0])
            # m_q likewise
            mpz_mod(&tmp.data[1], &cs.data[i], &k.data[3])
            mpz_powm(&tmp.data[1], &tmp.data[1], &k.data[5], &k.data[3])
            mpz_sub_ui(&tmp.data[1], &tmp.data[1], 1)
            mpz_tdiv_q(&tmp.data[1], &tmp.data[1], &k.data[1])
            mpz_mul(&tmp.data[1], &tmp.data[1], &k.data[7])
            mpz_mod(&tmp.data[1], &tmp.data[1], &k.data[1])
            # m = m_p + p * ((m_q - m_p) * p^-1 mod q)
            mpz_sub(&tmp.data[1], &tmp.data[1], &tmp.data[0])
            mpz_mul(&tmp.data[1], &tmp.data[1], &k.data[8])
            mpz_mod(&tmp.data[1], &tmp.data[1], &k.data[1])
            mpz_mul(&tmp.data[1], &tmp.data[1], &k.data[0])
            mpz_add(&cs.data[i], &tmp.data[0], &tmp.data[1])
    return _store_list(cs)

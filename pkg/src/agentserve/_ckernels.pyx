# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled token kernels. Must stay bit-identical to ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef uint64_t POLY_BASE = 0x100000001B3ULL
cdef uint64_t LEN_SALT = 0x9E3779B97F4A7C15ULL


cdef inline uint64_t _splitmix(uint64_t x) nogil:
    x = x + 0x9E3779B97F4A7C15ULL
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL
    return x ^ (x >> 31)


def block_keys(const int64_t[::1] tokens, Py_ssize_t block_size):
    cdef Py_ssize_t n = tokens.shape[0]
    cdef Py_ssize_t nblocks = (n + block_size - 1) // block_size
    out = np.empty(nblocks, dtype=np.uint64)
    cdef uint64_t[::1] keys = out
    cdef uint64_t parent = 0
    cdef uint64_t poly
    cdef Py_ssize_t b, i, start, stop
    with nogil:
        for b in range(nblocks):
            start = b * block_size
            stop = start + block_size
            if stop > n:
                stop = n
            poly = 0
            for i in range(start, stop):
                poly = poly * POLY_BASE + <uint64_t>tokens[i]
            poly = poly + <uint64_t>(stop - start) * LEN_SALT
            parent = _splitmix(parent ^ _splitmix(poly))
            keys[b] = parent
    return out


def common_prefix_len(const int64_t[::1] a, const int64_t[::1] b):
    cdef Py_ssize_t m = a.shape[0] if a.shape[0] < b.shape[0] else b.shape[0]
    cdef Py_ssize_t i = 0
    with nogil:
        while i < m and a[i] == b[i]:
            i += 1
    return i

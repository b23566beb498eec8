"""Pure numpy fallbacks for the token kernels.

Produces the same keys as the compiled module: a polynomial hash per block
(wrapping mod 2**64), salted with the block length and chained through
splitmix64.
"""

import numpy as np

MASK = (1 << 64) - 1
POLY_BASE = 0x100000001B3
LEN_SALT = 0x9E3779B97F4A7C15

_powers_cache: dict = {}


def _powers(block_size):
    p = _powers_cache.get(block_size)
    if p is None:
        vals = [pow(POLY_BASE, block_size - 1 - i, 1 << 64) for i in range(block_size)]
        p = np.array(vals, dtype=np.uint64)
        _powers_cache[block_size] = p
    return p


def _splitmix(x):
    x = (x + 0x9E3779B97F4A7C15) & MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK
    return x ^ (x >> 31)


def block_keys(tokens, block_size):
    tokens = np.ascontiguousarray(tokens, dtype=np.int64)
    n = tokens.shape[0]
    nfull, rem = divmod(n, block_size)
    powers = _powers(block_size)
    polys = []
    if nfull:
        full = tokens[: nfull * block_size].astype(np.uint64).reshape(nfull, block_size)
        polys.extend(int(v) for v in (full * powers).sum(axis=1, dtype=np.uint64))
    if rem:
        tail = tokens[nfull * block_size:].astype(np.uint64)
        polys.append(int((tail * powers[block_size - rem:]).sum(dtype=np.uint64)))
    out = np.empty(len(polys), dtype=np.uint64)
    parent = 0
    for b, poly in enumerate(polys):
        size = block_size if b < nfull else rem
        poly = (poly + size * LEN_SALT) & MASK
        parent = _splitmix(parent ^ _splitmix(poly))
        out[b] = parent
    return out


def common_prefix_len(a, b):
    m = min(len(a), len(b))
    if m == 0:
        return 0
    neq = np.flatnonzero(np.asarray(a[:m]) != np.asarray(b[:m]))
    return int(neq[0]) if neq.size else m

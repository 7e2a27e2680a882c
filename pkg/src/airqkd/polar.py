"""Polar transform and the index primitives used by the reconciliation rounds.

Bit blocks are plain ``numpy.uint8`` arrays holding 0/1 values. The integrated
syndrome string is an ``int8`` array with -1 marking undisclosed cells.

Convention: ``polar_transform(k) = k . F^{(x)m} . B_n`` over GF(2), i.e. the
Kronecker butterfly followed by the bit-reversal permutation. The decoder
works on the same convention (see :mod:`airqkd.decoder`).
"""

from __future__ import annotations

import numpy as np
from numba import njit

UNDISCLOSED = -1


class ProtocolViolation(Exception):
    """A message or state change that breaks the reconciliation protocol."""


def log2_exact(n: int) -> int:
    """Return m with 2**m == n, or raise ``ValueError``."""
    n = int(n)
    if n < 1 or n & (n - 1):
        raise ValueError(f"length {n} is not a power of two")
    return n.bit_length() - 1


def as_bits(x, n: int | None = None) -> np.ndarray:
    """Validate and convert to a 0/1 ``uint8`` vector."""
    a = np.asarray(x)
    if a.ndim != 1:
        raise ValueError("bit block must be one-dimensional")
    if a.size and (a.min() < 0 or a.max() > 1):
        raise ValueError("bit block entries must be 0 or 1")
    if n is not None and a.size != n:
        raise ValueError(f"expected {n} bits, got {a.size}")
    return a.astype(np.uint8, copy=False)


def as_indices(v, n: int) -> np.ndarray:
    """Validate an index set: distinct positions in ``[0, n)``, order kept."""
    a = np.asarray(v, dtype=np.int64).reshape(-1)
    if a.size:
        if a.min() < 0 or a.max() >= n:
            raise ValueError("index out of range")
        if np.unique(a).size != a.size:
            raise ValueError("duplicate index in index set")
    return a


def bit_reversal_perm(m: int) -> np.ndarray:
    """Permutation of ``range(2**m)`` mapping i to its m-bit reversal."""
    if m < 0:
        raise ValueError("m must be non-negative")
    n = 1 << m
    idx = np.arange(n, dtype=np.int64)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(m):
        rev |= ((idx >> b) & 1) << (m - 1 - b)
    return rev


@njit(cache=True)
def _butterfly_inplace(a):
    n = a.size
    h = n >> 1
    while h >= 1:
        for start in range(0, n, 2 * h):
            for j in range(start, start + h):
                a[j] ^= a[j + h]
        h >>= 1


def kron_transform(u: np.ndarray) -> np.ndarray:
    """``u . F^{(x)m}`` without the bit-reversal (an involution)."""
    out = np.array(u, dtype=np.uint8, copy=True)
    if out.size > 1:
        _butterfly_inplace(out)
    return out


def polar_transform(k) -> np.ndarray:
    """Encode a sifted key: ``U = k . F^{(x)m} . B_n``.

    Applying it twice returns the input, since ``F^{(x)m}`` is an involution
    over GF(2) and commutes with the bit-reversal.
    """
    k = as_bits(k)
    m = log2_exact(k.size)
    return kron_transform(k)[bit_reversal_perm(m)]


def index_select(u, v) -> np.ndarray:
    """Pick ``u[v_0], u[v_1], ...`` in the order of ``v``."""
    u = as_bits(u)
    v = as_indices(v, u.size)
    return u[v]


def new_syndrome_string(n: int) -> np.ndarray:
    return np.full(n, UNDISCLOSED, dtype=np.int8)


def insert(sd, s, v) -> np.ndarray:
    """Return a copy of ``sd`` with ``sd[v_j] = s_j``.

    Disclosed cells are never overwritten; trying to do so raises
    :class:`ProtocolViolation`.
    """
    sd = np.asarray(sd, dtype=np.int8)
    v = as_indices(v, sd.size)
    s = as_bits(s)
    if s.size != v.size:
        raise ProtocolViolation(f"payload has {s.size} bits for {v.size} positions")
    if np.any(sd[v] != UNDISCLOSED):
        raise ProtocolViolation("attempt to overwrite a disclosed cell")
    out = sd.copy()
    out[v] = s
    return out


def disclosed_count(sd) -> int:
    return int(np.count_nonzero(np.asarray(sd) != UNDISCLOSED))


def pack_bits(bits) -> bytes:
    """Pack LSB-first into bytes; trailing pad bits are zero."""
    return np.packbits(as_bits(bits), bitorder="little").tobytes()


def unpack_bits(data: bytes, nbits: int) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8)
    if raw.size * 8 < nbits:
        raise ValueError("not enough bytes for requested bit count")
    out = np.unpackbits(raw, bitorder="little")
    if np.any(out[nbits:]):
        raise ValueError("non-zero pad bits")
    return out[:nbits].astype(np.uint8)

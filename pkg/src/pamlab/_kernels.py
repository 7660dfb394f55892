"""Numba kernels for site-keyed Weibull fields.

Every lattice site ``z`` gets a 64-bit hash chained over its coordinates
starting from a per-field key.  The top 53 bits give a tail probability
``q(z) = (k + 0.5) 2^-53`` in (0, 1) and the potential is
``xi(z) = (-log q(z)) ** (1/gamma)``.  Because the value depends only on
(key, z), boxes can be grown without disturbing inner sites, and scans over
huge boxes never need to store the field.

Cubes are iterated row-major with the last coordinate fastest.  Rows are
processed in chunks: a vectorisable min-hash pass decides whether any site
of the chunk can pass a potential threshold, and only flagged chunks get the
scalar pass that evaluates logs and powers.
"""

from __future__ import annotations

import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_UMAX = np.uint64(0xFFFFFFFFFFFFFFFF)
_TWO_M53 = 1.0 / 9007199254740992.0
_CHUNK = 1024


@njit(inline="always", cache=True)
def mix64(x):
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


@njit(inline="always", cache=True)
def _zigzag(z):
    return np.uint64((z << 1) ^ (z >> 63))


@njit(inline="always", cache=True)
def _step(h, z):
    return mix64(h + GOLDEN * (_zigzag(z) + _ONE))


@njit(inline="always", cache=True)
def _tail_prob(h):
    return (np.float64(h >> _S11) + 0.5) * _TWO_M53


@njit(cache=True)
def mix64_scalar(x):
    return mix64(np.uint64(x))


@njit(cache=True)
def site_values(key, coords, gamma):
    """Potential values at the given (n, d) integer sites."""
    n, d = coords.shape
    out = np.empty(n)
    inv = 1.0 / gamma
    for i in range(n):
        h = key
        for k in range(d):
            h = _step(h, coords[i, k])
        out[i] = (-np.log(_tail_prob(h))) ** inv
    return out


@njit(cache=True)
def site_tail_probs(key, coords):
    n, d = coords.shape
    out = np.empty(n)
    for i in range(n):
        h = key
        for k in range(d):
            h = _step(h, coords[i, k])
        out[i] = _tail_prob(h)
    return out


@njit(cache=True)
def fill_cube(key, d, radius, gamma, out):
    """Write the potential on {-R..R}^d into ``out`` (flat, row-major)."""
    side = 2 * radius + 1
    nrows = side ** (d - 1)
    inv = 1.0 / gamma
    prefix = np.empty(max(d - 1, 1), dtype=np.int64)
    for row in range(nrows):
        rem = row
        for k in range(d - 2, -1, -1):
            prefix[k] = rem % side - radius
            rem //= side
        h0 = key
        for k in range(d - 1):
            h0 = _step(h0, prefix[k])
        base = row * side
        for j in range(side):
            h = _step(h0, j - radius)
            out[base + j] = (-np.log(_tail_prob(h))) ** inv


@njit(inline="always", cache=True)
def _chunk_min(h0, lo, hi):
    m = _UMAX
    for z in range(lo, hi):
        h = _step(h0, z)
        if h < m:
            m = h
    return m


@njit(inline="always", cache=True)
def _lex_less(a, b):
    for k in range(a.shape[0]):
        if a[k] < b[k]:
            return True
        if a[k] > b[k]:
            return False
    return False


@njit(cache=True)
def _row_segments(prefix, d, r_in, r_out):
    """Last-coordinate ranges of a row lying outside the inner cube."""
    inside = r_in >= 0
    for k in range(d - 1):
        if abs(prefix[k]) > r_in:
            inside = False
    if inside:
        return -r_out, -r_in, r_in + 1, r_out + 1
    return -r_out, r_out + 1, 0, 0


@njit(cache=True)
def _xi_threshold_q(x, gamma):
    if x <= 0.0:
        return 1.0
    return np.exp(-(x ** gamma))


@njit(cache=True)
def top2_scan(key, d, r_in, r_out, gamma, slope, psi1, z1, psi2, z2):
    """Top two of ``xi(z) - |z|_1 * slope`` over cube r_out minus cube r_in.

    The incoming (psi1, z1, psi2, z2) state is updated in place semantics and
    returned; pass -inf values to start fresh.  Ties go to the
    lexicographically smallest site.
    """
    side = 2 * r_out + 1
    nrows = side ** (d - 1)
    inv = 1.0 / gamma
    neg_pad = slope * d * r_out if slope < 0.0 else 0.0
    qthr = _xi_threshold_q(psi2 + neg_pad, gamma) if psi2 > -np.inf else 1.0
    prefix = np.zeros(max(d - 1, 1), dtype=np.int64)
    site = np.empty(d, dtype=np.int64)
    for row in range(nrows):
        rem = row
        l1p = 0
        for k in range(d - 2, -1, -1):
            prefix[k] = rem % side - r_out
            rem //= side
            l1p += abs(prefix[k])
        h0 = key
        for k in range(d - 1):
            h0 = _step(h0, prefix[k])
            site[k] = prefix[k]
        a0, a1, b0, b1 = _row_segments(prefix, d, r_in, r_out)
        for seg in range(2):
            lo = a0 if seg == 0 else b0
            hi = a1 if seg == 0 else b1
            c = lo
            while c < hi:
                ce = min(c + _CHUNK, hi)
                m = _chunk_min(h0, c, ce)
                if _tail_prob(m) <= qthr:
                    for z in range(c, ce):
                        h = _step(h0, z)
                        q = _tail_prob(h)
                        if q > qthr:
                            continue
                        xi = (-np.log(q)) ** inv
                        site[d - 1] = z
                        ps = xi - (l1p + abs(z)) * slope
                        if ps > psi1 or (ps == psi1 and _lex_less(site, z1)):
                            psi2 = psi1
                            z2[:] = z1
                            psi1 = ps
                            z1[:] = site
                        elif ps > psi2 or (ps == psi2 and _lex_less(site, z2)):
                            psi2 = ps
                            z2[:] = site
                        else:
                            continue
                        if psi2 > -np.inf:
                            qthr = _xi_threshold_q(psi2 + neg_pad, gamma)
                c = ce
    return psi1, psi2


@njit(cache=True)
def exceed_scan(key, d, r_in, r_out, gamma, base, slope):
    """Sites in cube r_out minus cube r_in with ``xi(z) >= base + |z| slope``."""
    side = 2 * r_out + 1
    nrows = side ** (d - 1)
    inv = 1.0 / gamma
    pre = base + (slope * d * r_out if slope < 0.0 else 0.0)
    qthr = _xi_threshold_q(pre, gamma)
    cap = 64
    coords = np.empty((cap, d), dtype=np.int64)
    vals = np.empty(cap)
    n = 0
    prefix = np.zeros(max(d - 1, 1), dtype=np.int64)
    for row in range(nrows):
        rem = row
        l1p = 0
        for k in range(d - 2, -1, -1):
            prefix[k] = rem % side - r_out
            rem //= side
            l1p += abs(prefix[k])
        h0 = key
        for k in range(d - 1):
            h0 = _step(h0, prefix[k])
        a0, a1, b0, b1 = _row_segments(prefix, d, r_in, r_out)
        for seg in range(2):
            lo = a0 if seg == 0 else b0
            hi = a1 if seg == 0 else b1
            c = lo
            while c < hi:
                ce = min(c + _CHUNK, hi)
                m = _chunk_min(h0, c, ce)
                if _tail_prob(m) <= qthr:
                    for z in range(c, ce):
                        q = _tail_prob(_step(h0, z))
                        if q > qthr:
                            continue
                        xi = (-np.log(q)) ** inv
                        if xi < base + (l1p + abs(z)) * slope:
                            continue
                        if n == cap:
                            cap *= 2
                            nc = np.empty((cap, d), dtype=np.int64)
                            nc[:n] = coords[:n]
                            coords = nc
                            nv = np.empty(cap)
                            nv[:n] = vals[:n]
                            vals = nv
                        for k in range(d - 1):
                            coords[n, k] = prefix[k]
                        coords[n, d - 1] = z
                        vals[n] = xi
                        n += 1
                c = ce
    return coords[:n].copy(), vals[:n].copy()

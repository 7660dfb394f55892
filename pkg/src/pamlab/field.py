"""Seeded Weibull potential fields on lattice boxes.

A field lives on the cube {-R..R}^d.  Ball queries use the l1 norm, which is
the norm used throughout for |z|.  Seeded fields derive every site value from
a hash of (seed, z), so a field of radius 50 agrees with the inner part of a
field of radius 5000 drawn from the same seed.  Large boxes can be scanned
through the numba kernels without ever being stored.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import _kernels as K
from .errors import ContractError, CoverageError, DomainError, PreconditionError, ResourceError

MAX_SITES = 50_000_000
DEFAULT_RHO = 0.25
DEFAULT_SIGMA = 0.4

_FIELD_DOMAIN = 0x50414D4649454C44  # b"PAMFIELD"
_U64 = (1 << 64) - 1

Site = tuple


def field_key(seed: int) -> np.uint64:
    if not 0 <= int(seed) <= _U64:
        raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.uint64(K.mix64_scalar(np.uint64(int(seed) ^ _FIELD_DOMAIN)))


def derive_seed(base_seed: int, index: int) -> int:
    """Seed of replica ``index`` in an ensemble rooted at ``base_seed``."""
    return int(K.mix64_scalar(np.uint64((int(base_seed) ^ int(index)) & _U64)))


def weibull_quantile(p, gamma):
    """Inverse of F(x) = 1 - exp(-x^gamma)."""
    if gamma <= 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p >= 1)) or np.any(np.isnan(p)):
        raise DomainError("p must lie in [0, 1)")
    out = (-np.log1p(-p)) ** (1.0 / gamma)
    return float(out) if out.ndim == 0 else out


def weibull_cdf(x, gamma):
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    return -np.expm1(-(x**gamma))


def ball_size(d: int, r: int) -> int:
    """Number of sites z in Z^d with |z|_1 <= r."""
    if r < 0:
        return 0
    return sum(2**k * math.comb(d, k) * math.comb(r, k) for k in range(0, d + 1))


def shell_size(d: int, r: int) -> int:
    """Number of sites z in Z^d with |z|_1 == r."""
    if r == 0:
        return 1
    return ball_size(d, r) - ball_size(d, r - 1)


def cube_coords(d: int, r: int) -> np.ndarray:
    side = 2 * r + 1
    return (np.indices((side,) * d).reshape(d, -1).T - r).astype(np.int64)


def as_site(z, d: int | None = None) -> Site:
    if isinstance(z, (int, np.integer)):
        site = (int(z),)
    else:
        site = tuple(int(c) for c in z)
    if d is not None and len(site) != d:
        raise ContractError(f"site {site} is not in Z^{d}")
    return site


def l1(z) -> int:
    return sum(abs(c) for c in as_site(z))


class PotentialField:
    """Weibull(gamma) potential on the cube {-R..R}^d.

    Build through :func:`sample_field` (materialised), :meth:`lazy` (values
    computed on demand, for boxes too big to store) or :meth:`from_array`
    (explicit values, handy for hand-made test fields).
    """

    def __init__(self, d, radius, gamma, seed=None, values=None, max_sites=MAX_SITES):
        if d < 1 or radius < 0:
            raise DomainError("need d >= 1 and radius >= 0")
        if gamma <= 0:
            raise DomainError(f"gamma must be positive, got {gamma}")
        if seed is None and values is None:
            raise ContractError("a field needs a seed or explicit values")
        self.d = int(d)
        self.radius = int(radius)
        self.gamma = float(gamma)
        self.seed = None if seed is None else int(seed)
        self.max_sites = max_sites
        self._key = None if seed is None else field_key(seed)
        if values is not None:
            values = np.ascontiguousarray(values, dtype=float)
            if values.shape != (2 * radius + 1,) * d:
                raise ContractError(f"values shape {values.shape} does not match d={d}, R={radius}")
            if np.any(values < 0) or not np.all(np.isfinite(values)):
                raise ContractError("potential values must be finite and nonnegative")
            values.flags.writeable = False
        self._values = values

    @classmethod
    def lazy(cls, d, radius, gamma, seed, max_sites=MAX_SITES):
        return cls(d, radius, gamma, seed=seed, max_sites=max_sites)

    @classmethod
    def from_array(cls, values, gamma=1.0):
        values = np.asarray(values, dtype=float)
        side = values.shape[0]
        if side % 2 == 0 or any(s != side for s in values.shape):
            raise ContractError("explicit field must be a cube of odd side")
        return cls(values.ndim, side // 2, gamma, values=values)

    def __repr__(self):
        src = f"seed={self.seed}" if self.seed is not None else "explicit"
        return f"PotentialField(d={self.d}, R={self.radius}, gamma={self.gamma}, {src})"

    @property
    def key(self):
        return self._key

    @property
    def seeded(self) -> bool:
        return self._key is not None

    @property
    def size(self) -> int:
        return (2 * self.radius + 1) ** self.d

    @property
    def materialized(self) -> bool:
        return self._values is not None

    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            self._values = self.cube(self.radius)
        return self._values

    def cube(self, r: int) -> np.ndarray:
        """Dense values on the sub-cube {-r..r}^d."""
        if r > self.radius:
            raise CoverageError(f"cube radius {r} exceeds field radius {self.radius}")
        n = (2 * r + 1) ** self.d
        if n > self.max_sites:
            raise ResourceError(f"cube of {n} sites exceeds the {self.max_sites}-site budget")
        if self._values is not None:
            lo = self.radius - r
            return self._values[(slice(lo, lo + 2 * r + 1),) * self.d]
        out = np.empty(n)
        K.fill_cube(self._key, self.d, r, self.gamma, out)
        out = out.reshape((2 * r + 1,) * self.d)
        out.flags.writeable = False
        return out

    def grow(self, radius: int) -> "PotentialField":
        if not self.seeded:
            raise CoverageError("explicit fields cannot grow")
        return PotentialField.lazy(self.d, radius, self.gamma, self.seed, self.max_sites)

    def contains(self, z) -> bool:
        return all(abs(c) <= self.radius for c in as_site(z, self.d))

    def __getitem__(self, z) -> float:
        site = as_site(z, self.d)
        if not self.contains(site):
            raise CoverageError(f"site {site} outside box of radius {self.radius}")
        if self._values is not None:
            return float(self._values[tuple(c + self.radius for c in site)])
        return float(K.site_values(self._key, np.array([site], dtype=np.int64), self.gamma)[0])

    def values_at(self, coords, strict: bool = True) -> np.ndarray:
        """Values at an (n, d) array of sites.

        With ``strict=False`` a seeded field also answers for sites outside
        its box (the values any larger box from the same seed would hold).
        """
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, self.d)
        outside = np.any(np.abs(coords) > self.radius, axis=1)
        if outside.any() and (strict or not self.seeded):
            raise CoverageError(f"{int(outside.sum())} sites outside box of radius {self.radius}")
        if self._values is not None and not outside.any():
            return self._values[tuple((coords + self.radius).T)]
        return K.site_values(self._key, np.ascontiguousarray(coords), self.gamma)

    def ball(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        """Sites and values of the l1-ball of radius r, in lexicographic order."""
        if r > self.radius:
            raise CoverageError(f"ball radius {r} exceeds field radius {self.radius}")
        coords = cube_coords(self.d, r)
        keep = np.abs(coords).sum(axis=1) <= r
        return coords[keep], self.cube(r).reshape(-1)[keep]

    def max_value(self) -> float:
        if self._values is not None:
            return float(self._values.max())
        psi1, _, _, _ = self.top2(0.0)
        return psi1

    def top2(self, slope: float, r_in: int = -1, state=None):
        """Top two of xi(z) - |z| slope over the box (minus cube r_in).

        Returns (psi1, z1, psi2, z2) with sites as tuples; ``state`` merges
        with a previous result so that a box can be grown shell by shell.
        """
        if state is None:
            psi1, z1, psi2, z2 = -np.inf, None, -np.inf, None
        else:
            psi1, z1, psi2, z2 = state
        if self._values is None:
            a1 = np.array(z1 if z1 is not None else (0,) * self.d, dtype=np.int64)
            a2 = np.array(z2 if z2 is not None else (0,) * self.d, dtype=np.int64)
            p1, p2 = K.top2_scan(self._key, self.d, r_in, self.radius, self.gamma, float(slope),
                                 float(psi1), a1, float(psi2), a2)
            z1 = tuple(int(c) for c in a1) if p1 > -np.inf else None
            z2 = tuple(int(c) for c in a2) if p2 > -np.inf else None
            return float(p1), z1, float(p2), z2
        coords = cube_coords(self.d, self.radius)
        vals = self._values.reshape(-1)
        if r_in >= 0:
            keep = np.abs(coords).max(axis=1) > r_in
            coords, vals = coords[keep], vals[keep]
        psi = vals - np.abs(coords).sum(axis=1) * slope
        cand = [(psi1, z1), (psi2, z2)] if state is not None else []
        if len(psi):
            order = np.lexsort(tuple(coords[:, k] for k in range(self.d - 1, -1, -1)) + (-psi,))[:2]
            cand += [(float(psi[i]), tuple(int(c) for c in coords[i])) for i in order]
        cand = [c for c in cand if c[1] is not None]
        cand.sort(key=lambda pz: (-pz[0], pz[1]))
        cand += [(-np.inf, None)] * 2
        return cand[0][0], cand[0][1], cand[1][0], cand[1][1]

    def exceedances(self, base: float, slope: float = 0.0, r_in: int = -1):
        """Sites with xi(z) >= base + |z| slope, with their values."""
        if self._values is None:
            return K.exceed_scan(self._key, self.d, r_in, self.radius, self.gamma,
                                 float(base), float(slope))
        coords = cube_coords(self.d, self.radius)
        vals = self._values.reshape(-1)
        keep = vals >= base + np.abs(coords).sum(axis=1) * slope
        if r_in >= 0:
            keep &= np.abs(coords).max(axis=1) > r_in
        return coords[keep], vals[keep]


def sample_field(d: int, R: int, gamma: float, seed: int, max_sites: int = MAX_SITES) -> PotentialField:
    """Materialised seeded field on {-R..R}^d."""
    n = (2 * R + 1) ** d
    if n > max_sites:
        raise ResourceError(f"box of {n} sites exceeds the {max_sites}-site budget")
    field = PotentialField(d, R, gamma, seed=seed, max_sites=max_sites)
    field.values
    return field


def order_statistics(field: PotentialField, r: int, k: int) -> list[tuple[Site, float]]:
    """The k largest values in the l1-ball of radius r, largest first."""
    if r > field.radius:
        raise CoverageError(f"ball radius {r} exceeds field radius {field.radius}")
    n_ball = ball_size(field.d, r)
    if not 1 <= k <= n_ball:
        raise ContractError(f"k must be in [1, {n_ball}], got {k}")
    if field.materialized or (2 * r + 1) ** field.d <= min(field.max_sites, 1 << 22):
        coords, vals = field.ball(r)
    else:
        coords, vals = _top_scan(field, r, k, n_ball)
    keys = tuple(coords[:, j] for j in range(field.d - 1, -1, -1)) + (-vals,)
    order = np.lexsort(keys)[:k]
    return [(tuple(int(c) for c in coords[i]), float(vals[i])) for i in order]


def _top_scan(field: PotentialField, r: int, k: int, n_ball: int):
    """Sites of the ball whose value beats a threshold holding at least k of them.

    The threshold starts where about 4k + 20 exceedances are expected and is
    lowered until k are found, so the result is exact.
    """
    box = PotentialField.lazy(field.d, r, field.gamma, field.seed, field.max_sites)
    expect = 4 * k + 20
    while True:
        level = 0.0 if expect >= n_ball else weibull_quantile(1 - expect / n_ball, field.gamma)
        coords, vals = box.exceedances(level)
        keep = np.abs(coords).sum(axis=1) <= r
        if keep.sum() >= k or level == 0.0:
            return coords[keep], vals[keep]
        expect *= 4


def top_site_sets(field: PotentialField, r: int, rho: float = DEFAULT_RHO,
                  sigma: float = DEFAULT_SIGMA) -> tuple[frozenset, frozenset]:
    """Locations of the top floor(r^rho) and floor(r^sigma) values in the ball."""
    if not 0 < rho < sigma < 0.5:
        raise DomainError(f"need 0 < rho < sigma < 1/2, got rho={rho}, sigma={sigma}")
    if r < 1:
        raise DomainError("r must be at least 1")
    n_ball = ball_size(field.d, r)
    k_f = min(math.floor(r**rho), n_ball)
    k_g = min(math.floor(r**sigma), n_ball)
    top = order_statistics(field, r, k_g)
    return frozenset(s for s, _ in top[:k_f]), frozenset(s for s, _ in top)


def _site_set(sites: Iterable) -> set:
    return {as_site(s) for s in sites}


def is_totally_disconnected(sites: Iterable) -> bool:
    members = _site_set(sites)
    for s in members:
        for k in range(len(s)):
            for step in (-1, 1):
                nb = s[:k] + (s[k] + step,) + s[k + 1:]
                if nb in members:
                    return False
    return True


@dataclass(frozen=True)
class GeoPath:
    """Nearest-neighbour lattice path y_0, ..., y_n."""

    sites: tuple

    def __init__(self, sites: Sequence):
        pts = tuple(as_site(s) for s in sites)
        if not pts:
            raise ContractError("a path needs at least one site")
        d = len(pts[0])
        for a, b in zip(pts, pts[1:]):
            if len(b) != d or sum(abs(x - y) for x, y in zip(a, b)) != 1:
                raise ContractError(f"step {a} -> {b} is not a nearest-neighbour step")
        object.__setattr__(self, "sites", pts)

    @property
    def n(self) -> int:
        return len(self.sites) - 1


class PathCounters(NamedTuple):
    n: int
    p: int
    q: float | None
    z: Site | None
    n_plus: int
    n_minus: int


def path_counters(path: GeoPath, field: PotentialField | None, A: Iterable) -> PathCounters:
    """Step count, span, path maximum of the potential and visits to A."""
    members = _site_set(A)
    y0 = path.sites[0]
    p = max(sum(abs(a - b) for a, b in zip(s, y0)) for s in path.sites)
    n_plus = sum(1 for s in path.sites if s in members)
    q = z = None
    if field is not None:
        vals = field.values_at(np.array(path.sites, dtype=np.int64))
        i = int(np.argmax(vals))
        q, z = float(vals[i]), path.sites[i]
    return PathCounters(path.n, p, q, z, n_plus, len(path.sites) - n_plus)


def count_bound(path: GeoPath, A: Iterable) -> float:
    members = _site_set(A)
    c = path_counters(path, None, members)
    return (c.n - c.p) / 2 + min(len(members), math.ceil((c.p + 1) / 2))


def check_count_bound(path: GeoPath, A: Iterable) -> bool:
    """Whether n_+(y, A) <= (n - p)/2 + min(|A|, ceil((p+1)/2)) holds."""
    members = _site_set(A)
    if not is_totally_disconnected(members):
        raise PreconditionError("A must be totally disconnected")
    c = path_counters(path, None, members)
    return c.n_plus <= count_bound(path, members)


# binary snapshots: header then row-major little-endian doubles
_MAGIC = b"PAMF"
_VERSION = 1
_HEADER = struct.Struct("<4sHHIQdQ")
_FLAG_SEEDED = 1


def save_field(field: PotentialField, path) -> None:
    flags = _FLAG_SEEDED if field.seeded else 0
    header = _HEADER.pack(_MAGIC, _VERSION, field.d, flags, field.radius, field.gamma,
                          field.seed if field.seeded else 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def load_field(path) -> PotentialField:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ContractError("truncated field file")
    magic, version, d, flags, radius, gamma, seed = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ContractError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise ContractError(f"unsupported field file version {version}")
    n = (2 * radius + 1) ** d
    body = raw[_HEADER.size:]
    if len(body) != 8 * n:
        raise ContractError(f"expected {n} values, file holds {len(body) // 8}")
    values = np.frombuffer(body, dtype="<f8").reshape((2 * radius + 1,) * d)
    return PotentialField(d, radius, gamma, seed=seed if flags & _FLAG_SEEDED else None,
                          values=values.copy())

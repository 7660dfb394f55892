"""Solutions of du/dt = Lap u + xi u on lattice boxes, with u = 0 outside.

The raw solution overflows doubles almost at once, so the integrator evolves
the profile v = u/U and the log of the total mass U separately:

    v' = A v - m(v) v,    (log U)' = m(v),    m(v) = sum_z (A v)(z),

with A = Lap + diag(xi).  Lap f(x) = sum_{y ~ x} (f(y) - f(x)), the generator
of the continuous-time simple random walk jumping at rate 2d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numba import njit

from .errors import BudgetError, ContractError, CoverageError, IntegrationError, NumericalError
from .field import PotentialField, as_site, derive_seed, l1

FK_BUDGET = 30.0
FK_BLOCK = 1 << 16
STEP_SAFETY = 3.0
# relative tolerance on sites stored under a nonzero gauge (far tails)
FAR_TOL = {"rk": 1e-3, "etd": 1e-2}
ETD_HMAX = 1.0


def box_neighbours(d: int, radius: int) -> np.ndarray:
    """Neighbour table of the cube {-R..R}^d in row-major order, -1 outside."""
    side = 2 * radius + 1
    n = side**d
    grid = np.arange(n).reshape((side,) * d)
    nb = np.full((n, 2 * d), -1, dtype=np.int64)
    for k in range(d):
        lo = [slice(None)] * d
        hi = [slice(None)] * d
        lo[k], hi[k] = slice(0, side - 1), slice(1, side)
        up = np.full((side,) * d, -1, dtype=np.int64)
        down = np.full((side,) * d, -1, dtype=np.int64)
        up[tuple(lo)] = grid[tuple(hi)]
        down[tuple(hi)] = grid[tuple(lo)]
        nb[:, 2 * k] = up.reshape(-1)
        nb[:, 2 * k + 1] = down.reshape(-1)
    return nb


def box_operator(values: np.ndarray) -> sp.csr_matrix:
    """Sparse Lap + diag(xi) on a cube with zero exterior values."""
    d = values.ndim
    radius = values.shape[0] // 2
    nb = box_neighbours(d, radius)
    n = values.size
    rows = np.repeat(np.arange(n), 2 * d)
    cols = nb.reshape(-1)
    keep = cols >= 0
    off = sp.csr_matrix((np.ones(keep.sum()), (rows[keep], cols[keep])), shape=(n, n))
    return (off + sp.diags(values.reshape(-1) - 2.0 * d)).tocsr()


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = np.array([
    [0, 0, 0, 0, 0, 0],
    [1 / 5, 0, 0, 0, 0, 0],
    [3 / 40, 9 / 40, 0, 0, 0, 0],
    [44 / 45, -56 / 15, 32 / 9, 0, 0, 0],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0, 0],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
])
_E = np.array([71 / 57600, 0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


# gauge limits: stored values w = v e^g are kept inside [W_LO, W_HI]
W_LO = 1e-150
W_HI = 1e150


@njit(cache=True)
def _rhs(w, xi, nb, coef, mcol, diag, out):
    """Gauged right-hand side; coef[i, j] = e^{g_i - g_nb}, mcol = colsum(A) e^{-g}."""
    n = w.shape[0]
    m = 0.0
    for i in range(n):
        a = (xi[i] - diag) * w[i]
        for j in range(nb.shape[1]):
            k = nb[i, j]
            if k >= 0 and w[k] != 0.0:
                a += coef[i, j] * w[k]
        out[i] = a
        m += mcol[i] * w[i]
    for i in range(n):
        out[i] -= m * w[i]
    return m


@njit(cache=True)
def _set_coef(i, g, nb, coef):
    for j in range(nb.shape[1]):
        k = nb[i, j]
        if k >= 0:
            coef[i, j] = math.exp(min(g[i] - g[k], 700.0))


@njit(cache=True)
def _regauge(w, g, nb, coef, mcol, colsum, eg):
    """Re-centre stored values that drift out of range; seed the gauge of fresh sites.

    Returns the number of sites whose gauge changed.
    """
    n = w.shape[0]
    changed = np.zeros(n, dtype=np.bool_)
    cnt = 0
    for i in range(n):
        wi = w[i]
        if wi > W_HI or (0.0 < wi < W_LO):
            lw = math.log(wi)
            shift = min(lw, g[i])
            if shift != 0.0:
                g[i] -= shift
                w[i] = math.exp(lw - shift)
                changed[i] = True
        elif wi == 0.0:
            # an empty site takes the largest gauge among its occupied neighbours,
            # so mass arriving from them is representable
            best = g[i]
            for j in range(nb.shape[1]):
                k = nb[i, j]
                if k >= 0 and w[k] > 0.0 and g[k] > best:
                    best = g[k]
            if best != g[i]:
                g[i] = best
                changed[i] = True
    for i in range(n):
        if changed[i]:
            cnt += 1
            eg[i] = math.exp(-g[i])
            mcol[i] = colsum[i] * eg[i]
            _set_coef(i, g, nb, coef)
            for j in range(nb.shape[1]):
                k = nb[i, j]
                if k >= 0:
                    _set_coef(k, g, nb, coef)
    return cnt


@njit(cache=True)
def _integrate(v, xi, nb, d, t_out, rtol, atol, far_tol, hmax, A, E, max_steps, profiles, logu):
    """Adaptive DP5(4) with first-same-as-last; returns (status, steps, rejects).

    The profile is stored as w = v e^g with a per-site gauge g >= 0 that is
    adjusted between steps.  Without it, far sites underflow to zero long
    before the mass can tunnel to them.  The gauge is a diagonal similarity,
    so it leaves the stability of the explicit scheme unchanged.  The error
    test is taken in v units; sites far below atol are not controlled.
    """
    n = v.shape[0]
    diag = 2.0 * d
    nd = nb.shape[1]
    K = np.empty((7, n))
    M = np.empty(7)
    y = np.empty(n)
    wn = np.empty(n)
    w = v.copy()
    g = np.zeros(n)
    eg = np.ones(n)
    coef = np.ones((n, nd))
    colsum = np.empty(n)
    for i in range(n):
        c = xi[i] - diag
        for j in range(nd):
            if nb[i, j] >= 0:
                c += 1.0
        colsum[i] = c
    mcol = colsum.copy()
    L = 0.0
    t = 0.0
    M[0] = _rhs(w, xi, nb, coef, mcol, diag, K[0])
    h = min(hmax, 1e-3)
    steps = 0
    rejects = 0
    j_out = 0
    while j_out < t_out.shape[0]:
        target = t_out[j_out]
        if t >= target:
            logu[j_out] = L
            for i in range(n):
                profiles[j_out, i] = w[i] * eg[i]
            j_out += 1
            continue
        land = False
        if t + h >= target:
            h = target - t
            land = True
        for s in range(1, 7):
            for i in range(n):
                acc = w[i]
                for r in range(s):
                    acc += h * A[s, r] * K[r, i]
                y[i] = acc
            M[s] = _rhs(y, xi, nb, coef, mcol, diag, K[s])
        Ln = L
        for r in range(6):
            Ln += h * A[6, r] * M[r]
        err = 0.0
        for i in range(n):
            wn[i] = y[i]
            e = 0.0
            for r in range(7):
                e += E[r] * K[r, i]
            big = max(abs(w[i]), abs(wn[i]))
            if g[i] == 0.0:
                q = abs(h * e) / (atol + rtol * big)
            else:
                q = abs(h * e) / (far_tol * (1e-6 + big))
            if q > err:
                err = q
        eL = 0.0
        for r in range(7):
            eL += E[r] * M[r]
        qL = abs(h * eL) / (rtol * max(1.0, abs(L), abs(Ln)))
        if qL > err:
            err = qL
        steps += 1
        if steps > max_steps:
            return 2, steps, rejects
        if err <= 1.0:
            t = target if land else t + h
            L = Ln
            tot = 0.0
            for i in range(n):
                if wn[i] < 0.0:
                    wn[i] = 0.0
                tot += wn[i] * eg[i]
            for i in range(n):
                w[i] = wn[i] / tot
            _regauge(w, g, nb, coef, mcol, colsum, eg)
            M[0] = _rhs(w, xi, nb, coef, mcol, diag, K[0])
            fac = 5.0 if err == 0.0 else min(5.0, 0.9 * err ** (-0.2))
            h = min(hmax, h * fac)
        else:
            rejects += 1
            h = h * max(0.2, 0.9 * err ** (-0.2))
            if h < 1e-13 * max(1.0, t):
                return 1, steps, rejects
    return 0, steps, rejects


@njit(cache=True)
def _phis(z):
    """phi_1, phi_2, phi_3 of z, by series near zero."""
    if abs(z) < 1.0:
        p1 = p2 = p3 = 0.0
        term = 1.0
        for j in range(20):
            # term = z^j / j!
            p1 += term / (j + 1)
            p2 += term / ((j + 1) * (j + 2))
            p3 += term / ((j + 1) * (j + 2) * (j + 3))
            term *= z / (j + 1)
        return p1, p2, p3
    ez = math.exp(z)
    p1 = (ez - 1.0) / z
    p2 = (ez - 1.0 - z) / (z * z)
    p3 = (ez - 1.0 - z - 0.5 * z * z) / (z * z * z)
    return p1, p2, p3


@njit(cache=True)
def _etd_coef(lam, h, C):
    """Per-site ETDRK4 weights for u' = diag(lam) u + N u over a step h.

    Rows of C: e^{h lam}, e^{h lam/2}, (h/2) phi_1(h lam/2), and the three
    update weights of the Cox-Matthews scheme.
    """
    for i in range(lam.shape[0]):
        z = h * lam[i]
        p1, p2, p3 = _phis(z)
        q1, _, _ = _phis(0.5 * z)
        C[0, i] = math.exp(z)
        C[1, i] = math.exp(0.5 * z)
        C[2, i] = 0.5 * h * q1
        C[3, i] = h * (p1 - 3.0 * p2 + 4.0 * p3)
        C[4, i] = h * (p2 - 2.0 * p3)
        C[5, i] = h * (4.0 * p3 - p2)


@njit(cache=True)
def _couple(w, nb, coef, out):
    for i in range(w.shape[0]):
        a = 0.0
        for j in range(nb.shape[1]):
            k = nb[i, j]
            if k >= 0 and w[k] != 0.0:
                a += coef[i, j] * w[k]
        out[i] = a


@njit(cache=True)
def _etd_step(w, nw, C, nb, coef, out, wa, wb, na, nbv, nc):
    """One ETDRK4 step from w with coupling nw = N w already evaluated."""
    n = w.shape[0]
    for i in range(n):
        wa[i] = C[1, i] * w[i] + C[2, i] * nw[i]
    _couple(wa, nb, coef, na)
    for i in range(n):
        wb[i] = C[1, i] * w[i] + C[2, i] * na[i]
    _couple(wb, nb, coef, nbv)
    for i in range(n):
        wb[i] = C[1, i] * wa[i] + C[2, i] * (2.0 * nbv[i] - nw[i])
    _couple(wb, nb, coef, nc)
    for i in range(n):
        out[i] = C[0, i] * w[i] + C[3, i] * nw[i] + 2.0 * C[4, i] * (na[i] + nbv[i]) + C[5, i] * nc[i]


@njit(cache=True)
def _integrate_etd(v, xi, nb, d, t_out, rtol, atol, far_tol, hmax, max_steps, profiles, logu):
    """Exponential time differencing with the potential treated exactly.

    Each step solves u' = (A - mu) u from the normalised profile, with the
    diagonal xi - 2d - mu integrated exactly and the lattice coupling by the
    fourth-order Cox-Matthews scheme.  Step size is controlled by step
    doubling.  Storage uses the same per-site gauge as the Runge-Kutta
    integrator.  Returns (status, steps, rejects).
    """
    n = v.shape[0]
    nd = nb.shape[1]
    w = v.copy()
    g = np.zeros(n)
    eg = np.ones(n)
    coef = np.ones((n, nd))
    colsum = np.empty(n)
    for i in range(n):
        c = xi[i] - 2.0 * d
        for j in range(nd):
            if nb[i, j] >= 0:
                c += 1.0
        colsum[i] = c
    mcol = colsum.copy()
    lam = np.empty(n)
    Cf = np.empty((6, n))
    Ch = np.empty((6, n))
    nw = np.empty(n)
    nh = np.empty(n)
    big = np.empty(n)
    half = np.empty(n)
    small = np.empty(n)
    wa = np.empty(n)
    wb = np.empty(n)
    na = np.empty(n)
    nbv = np.empty(n)
    nc = np.empty(n)
    mu = 0.0
    for i in range(n):
        mu += mcol[i] * w[i]
    h = min(hmax, 1e-3)
    h_coef = -1.0
    mu_coef = math.nan
    L = 0.0
    t = 0.0
    steps = 0
    rejects = 0
    j_out = 0
    while j_out < t_out.shape[0]:
        target = t_out[j_out]
        if t >= target:
            logu[j_out] = L
            for i in range(n):
                profiles[j_out, i] = w[i] * eg[i]
            j_out += 1
            continue
        land = False
        hs = h
        if t + hs >= target:
            hs = target - t
            land = True
        if hs != h_coef or mu != mu_coef:
            for i in range(n):
                lam[i] = xi[i] - 2.0 * d - mu
            _etd_coef(lam, hs, Cf)
            _etd_coef(lam, 0.5 * hs, Ch)
            h_coef = hs
            mu_coef = mu
        _couple(w, nb, coef, nw)
        _etd_step(w, nw, Cf, nb, coef, big, wa, wb, na, nbv, nc)
        _etd_step(w, nw, Ch, nb, coef, half, wa, wb, na, nbv, nc)
        _couple(half, nb, coef, nh)
        _etd_step(half, nh, Ch, nb, coef, small, wa, wb, na, nbv, nc)
        err = 0.0
        for i in range(n):
            e = abs(small[i] - big[i]) / 15.0
            top = max(abs(w[i]), abs(small[i]))
            if g[i] == 0.0:
                q = e / (atol + rtol * top)
            else:
                q = e / (far_tol * (1e-6 + top))
            if not q <= err:
                err = q
        steps += 1
        if steps > max_steps:
            return 2, steps, rejects
        if err <= 1.0:
            tot = 0.0
            for i in range(n):
                if small[i] < 0.0:
                    small[i] = 0.0
                tot += small[i] * eg[i]
            if not (tot > 0.0 and math.isfinite(tot)):
                return 3, steps, rejects
            t = target if land else t + hs
            L += mu * hs + math.log(tot)
            for i in range(n):
                w[i] = small[i] / tot
            _regauge(w, g, nb, coef, mcol, colsum, eg)
            m = 0.0
            for i in range(n):
                m += mcol[i] * w[i]
            # re-centre the exponent when the growth rate has drifted
            if abs(m - mu) > 0.25:
                mu = m
            if not land:
                fac = 4.0 if err == 0.0 else min(4.0, 0.9 * err ** (-0.2))
                h = min(hmax, hs * fac)
                # keep the step on a geometric grid so the weights can be reused
                h = 2.0 ** (math.floor(4.0 * math.log2(h)) / 4.0)
        else:
            rejects += 1
            fac = 0.2 if not err < math.inf else max(0.2, 0.9 * err ** (-0.2))
            h = hs * fac
            h = 2.0 ** (math.floor(4.0 * math.log2(h)) / 4.0)
            if h < 1e-13 * max(1.0, t):
                return 1, steps, rejects
    return 0, steps, rejects


@dataclass
class SolveResult:
    box_radius: int
    d: int
    times: np.ndarray
    log_total_mass: np.ndarray
    profile: np.ndarray | None
    argmax_site: list
    truncation_shift: float | None = None
    steps: int = 0
    extra: dict = dc_field(default_factory=dict)

    def time_index(self, t: float) -> int:
        hits = np.flatnonzero(np.isclose(self.times, t, rtol=1e-12, atol=0.0))
        if not len(hits):
            raise ContractError(f"t={t} is not an output time")
        return int(hits[0])

    def mass_at(self, t: float, z) -> float:
        """Normalised mass u(t, z)/U(t)."""
        if self.profile is None:
            raise ContractError("profiles were not recorded")
        site = as_site(z, self.d)
        if any(abs(c) > self.box_radius for c in site):
            return 0.0
        idx = tuple(c + self.box_radius for c in site)
        return float(self.profile[self.time_index(t)][idx])

    def log_mass_at(self, t: float) -> float:
        return float(self.log_total_mass[self.time_index(t)])


def _argmax_site(profile: np.ndarray, radius: int) -> tuple:
    flat = profile.reshape(-1)
    top = flat.max()
    i = int(np.flatnonzero(flat == top)[0])  # row-major first = lexicographically smallest
    return tuple(int(c) - radius for c in np.unravel_index(i, profile.shape))


def _run(values: np.ndarray, t_grid: np.ndarray, rel_tol: float, max_steps: int, method: str,
         far_tol: float | None = None):
    d = values.ndim
    radius = values.shape[0] // 2
    xi = np.ascontiguousarray(values.reshape(-1), dtype=float)
    nb = box_neighbours(d, radius)
    v = np.zeros(xi.size)
    v[xi.size // 2] = 1.0
    profiles = np.empty((len(t_grid), xi.size))
    logu = np.empty(len(t_grid))
    if method == "rk":
        hmax = STEP_SAFETY / (xi.max() - xi.min() + 4.0 * d)
        status, steps, rejects = _integrate(v, xi, nb, d, t_grid, rel_tol, rel_tol * 1e-6,
                                            FAR_TOL["rk"] if far_tol is None else far_tol, hmax,
                                            _A, _E, max_steps, profiles, logu)
    elif method == "etd":
        status, steps, rejects = _integrate_etd(v, xi, nb, d, t_grid, rel_tol, rel_tol * 1e-6,
                                                FAR_TOL["etd"] if far_tol is None else far_tol,
                                                ETD_HMAX / d, max_steps, profiles, logu)
    else:
        raise ContractError(f"unknown method {method!r}; use 'rk' or 'etd'")
    if status == 1:
        raise IntegrationError(f"step size underflow after {steps} steps ({rejects} rejected)")
    if status == 2:
        raise IntegrationError(f"step budget of {max_steps} exhausted")
    if status == 3:
        raise IntegrationError(f"profile lost all mass after {steps} steps")
    return logu, profiles.reshape((len(t_grid),) + values.shape), steps


def solve_pde(field: PotentialField, box_radius: int, t_grid, rel_tol: float = 1e-8,
              keep_profiles: bool = True, check_truncation: bool = False,
              max_steps: int = 50_000_000, method: str = "rk", far_tol: float | None = None) -> SolveResult:
    """Integrate from u(0) = delta_0 on the cube of radius box_radius.

    ``method`` is "rk" (Dormand-Prince 5(4)) or "etd" (exponential time
    differencing, much faster when the potential range is wide).

    Sites far below the current maximum are gauged and controlled to the
    relative tolerance ``far_tol`` (default per method); tighten it when
    mass moves to a distant site and log U must be accurate beyond ~1e-4.

    With ``check_truncation`` the problem is re-solved on the doubled box
    and the largest relative shift of log U is reported.
    """
    t_grid = np.asarray(t_grid, dtype=float).reshape(-1)
    if not len(t_grid) or np.any(t_grid <= 0) or np.any(np.diff(t_grid) <= 0):
        raise ContractError("t_grid must be positive and strictly increasing")
    if box_radius > field.radius:
        raise CoverageError(f"box radius {box_radius} exceeds field radius {field.radius}")
    values = np.asarray(field.cube(box_radius))
    logu, profiles, steps = _run(values, t_grid, rel_tol, max_steps, method, far_tol)
    shift = None
    if check_truncation:
        big = field if field.radius >= 2 * box_radius else field.grow(2 * box_radius)
        logu2, _, _ = _run(np.asarray(big.cube(2 * box_radius)), t_grid, rel_tol, max_steps, method, far_tol)
        shift = float(np.max(np.abs(logu2 - logu) / np.maximum(1.0, np.abs(logu2))))
    argmax = [_argmax_site(p, box_radius) for p in profiles]
    return SolveResult(box_radius, field.d, t_grid, logu, profiles if keep_profiles else None,
                       argmax, shift, steps, {"method": method})


# Feynman-Kac Monte Carlo


@dataclass(frozen=True)
class MCResult:
    total: float
    total_se: float
    targets: dict
    n_paths: int


@dataclass(frozen=True)
class SplitResult:
    u1: float
    u1_se: float
    u2: float
    u2_se: float
    total: float
    total_se: float
    n_paths: int


class _Walker:
    """Potential lookups for walks, killed outside the box when one is given."""

    def __init__(self, field: PotentialField, box_radius):
        self.field = field
        if box_radius is None:
            self.radius = None if field.seeded else field.radius
            self.kill = False
        else:
            if box_radius > field.radius:
                raise CoverageError(f"box radius {box_radius} exceeds field radius {field.radius}")
            self.radius = int(box_radius)
            self.kill = True
        r = field.radius if self.radius is None else self.radius
        self.xi_max = float(np.max(field.cube(r))) if (2 * r + 1) ** field.d <= field.max_sites else field.max_value()

    def values(self, pos):
        if self.radius is None:
            return self.field.values_at(pos, strict=False)
        inside = np.all(np.abs(pos) <= self.radius, axis=1)
        if not self.kill and not inside.all():
            raise CoverageError("a walk left the stored box of an explicit field")
        out = np.zeros(len(pos))
        out[inside] = self.field.values_at(pos[inside])
        return out, inside


def _walk_block(walker: _Walker, t: float, n: int, rng, z1=None, ball_radius=None):
    """One block of paths: log-weights, end points, and the z1/ball flags."""
    d = walker.field.d
    pos = np.zeros((n, d), dtype=np.int64)
    logw = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    clock = np.zeros(n)
    running = np.ones(n, dtype=bool)
    z1a = None if z1 is None else np.asarray(z1, dtype=np.int64)
    hit = np.zeros(n, dtype=bool) if z1a is None else np.all(pos == z1a, axis=1)
    left = np.zeros(n, dtype=bool)
    while running.any():
        idx = np.flatnonzero(running)
        p = pos[idx]
        res = walker.values(p)
        if isinstance(res, tuple):
            xi, inside = res
            dead = ~inside
            alive[idx[dead]] = False
            running[idx[dead]] = False
            idx, p, xi = idx[~dead], p[~dead], xi[~dead]
        else:
            xi = res
        hold = rng.exponential(1.0 / (2 * d), len(idx))
        dt = np.minimum(hold, t - clock[idx])
        logw[idx] += xi * dt
        clock[idx] += dt
        finished = clock[idx] >= t
        running[idx[finished]] = False
        mv = idx[~finished]
        if len(mv):
            axis = rng.integers(0, d, len(mv))
            step = rng.integers(0, 2, len(mv)) * 2 - 1
            pos[mv, axis] += step
            if z1a is not None:
                hit[mv] |= np.all(pos[mv] == z1a, axis=1)
            if ball_radius is not None:
                left[mv] |= np.abs(pos[mv]).sum(axis=1) > ball_radius
    w = np.where(alive, np.exp(logw), 0.0)
    return w, pos, hit, left


def _check_budget(walker: _Walker, t: float, budget: float) -> None:
    if t * walker.xi_max > budget:
        raise BudgetError(f"t * max(xi) = {t * walker.xi_max:.3g} exceeds the budget {budget:g}; "
                          "the exponential weights would make the estimate meaningless")


def _blocks(n_paths: int, seed: int):
    done, b = 0, 0
    while done < n_paths:
        n = min(FK_BLOCK, n_paths - done)
        yield n, np.random.default_rng(derive_seed(seed, b))
        done += n
        b += 1


def _mean_se(sums, sq, n):
    s, q = math.fsum(sums), math.fsum(sq)
    mean = s / n
    var = max(q / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return mean, math.sqrt(var / n)


def feynman_kac_mc(field: PotentialField, box_radius, t: float, n_paths: int, seed: int,
                   targets=(), budget: float = FK_BUDGET) -> MCResult:
    """Monte Carlo u(t, z) = E[exp(int_0^t xi(X_s) ds) 1{X_t = z}] and U(t)."""
    walker = _Walker(field, box_radius)
    _check_budget(walker, t, budget)
    sites = [as_site(z, field.d) for z in targets]
    acc = {z: ([], []) for z in sites}
    tot_s, tot_q = [], []
    for n, rng in _blocks(n_paths, seed):
        w, pos, _, _ = _walk_block(walker, t, n, rng)
        tot_s.append(float(w.sum()))
        tot_q.append(float((w * w).sum()))
        for z in sites:
            wz = np.where(np.all(pos == np.asarray(z), axis=1), w, 0.0)
            acc[z][0].append(float(wz.sum()))
            acc[z][1].append(float((wz * wz).sum()))
    total, total_se = _mean_se(tot_s, tot_q, n_paths)
    est = {z: _mean_se(s, q, n_paths) for z, (s, q) in acc.items()}
    return MCResult(total, total_se, est, n_paths)


def path_mass_split(field: PotentialField, t: float, z1, ball_radius: int | None = None,
                    n_paths: int = 100_000, seed: int = 0, box_radius=None,
                    budget: float = FK_BUDGET) -> SplitResult:
    """Split U(t) into paths that reach z1 by t without leaving the l1-ball, and the rest."""
    z1 = as_site(z1, field.d)
    if ball_radius is None:
        ball_radius = math.ceil(1.2 * l1(z1))
    walker = _Walker(field, box_radius)
    _check_budget(walker, t, budget)
    s1, q1, s2, q2, st, qt = [], [], [], [], [], []
    for n, rng in _blocks(n_paths, seed):
        w, _, hit, left = _walk_block(walker, t, n, rng, z1=z1, ball_radius=ball_radius)
        one = hit & ~left
        w1 = np.where(one, w, 0.0)
        w2 = np.where(one, 0.0, w)
        s1.append(float(w1.sum())); q1.append(float((w1 * w1).sum()))
        s2.append(float(w2.sum())); q2.append(float((w2 * w2).sum()))
        st.append(float(w.sum())); qt.append(float((w * w).sum()))
    u1, e1 = _mean_se(s1, q1, n_paths)
    u2, e2 = _mean_se(s2, q2, n_paths)
    u, e = _mean_se(st, qt, n_paths)
    return SplitResult(u1, e1, u2, e2, u, e, n_paths)


# spectral diagnostics


@dataclass
class SpectralResult:
    lambda1: float
    eigvec: np.ndarray
    lambda2: float
    gap: float
    potential_gap: float
    residual: float
    box_radius: int
    z1: tuple

    def eigvec_at(self, z) -> float:
        site = as_site(z, self.eigvec.ndim)
        return float(self.eigvec[tuple(c + self.box_radius for c in site)])


def _rayleigh_refine(A, v, lam, tol, max_iter, deflate=None):
    """Rayleigh quotient iteration from (lam, v); optional vector to project out."""
    n = A.shape[0]
    eye = sp.identity(n, format="csc")
    res = math.inf
    for _ in range(max_iter):
        if deflate is not None:
            v = v - deflate * (deflate @ v)
        v = v / np.linalg.norm(v)
        av = A @ v
        lam = float(v @ av)
        res = float(np.max(np.abs(av - lam * v)) / np.max(np.abs(v)))
        if res < tol:
            return lam, v, res
        try:
            lu = spla.splu((A - (lam + 1e-14 * max(1.0, abs(lam))) * eye).tocsc())
            v = lu.solve(v)
        except RuntimeError:
            # exactly singular shift means lam is already an eigenvalue
            return lam, v, res
        if not np.all(np.isfinite(v)):
            raise NumericalError("inverse iteration produced non-finite values")
    return lam, v, res


def principal_eigen(field: PotentialField, box_radius: int, tol: float = 1e-10,
                    max_iter: int = 5000) -> SpectralResult:
    """Top two eigenpairs of Lap + diag(xi) with zero exterior values.

    Block subspace iteration on (mu I - A)^{-1}, mu = max xi + 1, with
    Rayleigh-Ritz extraction.  Since A <= max xi, the shift puts the top two
    eigenvalues first.  Rayleigh quotient iteration polishes a pair that
    stalls above the residual tolerance.
    """
    if box_radius > field.radius:
        raise CoverageError(f"box radius {box_radius} exceeds field radius {field.radius}")
    values = np.asarray(field.cube(box_radius))
    d = values.ndim
    A = box_operator(values)
    n = A.shape[0]
    xi = values.reshape(-1)
    iz = int(np.flatnonzero(xi == xi.max())[0])
    z1 = tuple(int(c) - box_radius for c in np.unravel_index(iz, values.shape))
    if n == 1:
        lam = float(xi[0] - 2 * d)
        return SpectralResult(lam, np.ones_like(values), -math.inf, math.inf, math.inf, 0.0, box_radius, z1)
    # every eigenvalue lies below xi_max, so (mu I - A)^{-1} ranks them in algebraic order
    mu = float(xi.max()) + 1.0
    lu = spla.splu((mu * sp.identity(n, format="csc") - A).tocsc())
    rng = np.random.default_rng(12345)
    block = min(n, 8)  # guard vectors speed up the second pair when lambda2 ~ lambda3
    Q = np.linalg.qr(np.column_stack([np.ones(n), rng.standard_normal((n, block - 1))]))[0]
    res = np.full(2, np.inf)
    ritz = np.zeros(2)
    scale = max(1.0, float(np.abs(xi).max()) + 2.0 * d)
    tightened = False
    for _ in range(max_iter):
        Q, _ = np.linalg.qr(lu.solve(Q))
        AQ = A @ Q
        ev, U = np.linalg.eigh(Q.T @ AQ)
        Q, AQ, ritz = Q @ U[:, ::-1], AQ @ U[:, ::-1], ev[::-1]
        R = AQ[:, :2] - Q[:, :2] * ritz[:2]
        res = np.max(np.abs(R), axis=0) / np.max(np.abs(Q[:, :2]), axis=0)
        if np.all(res < tol):
            break
        if not tightened and np.all(res < 1e-3 * scale):
            # the top Ritz value is within the 2-norm residual of lambda1, so
            # this shift still lies above the whole spectrum
            mu = float(ritz[0] + 2.0 * np.linalg.norm(R[:, 0]) + 1e-6 * scale)
            lu = spla.splu((mu * sp.identity(n, format="csc") - A).tocsc())
            tightened = True
    v1, lam1, res1 = Q[:, 0], float(ritz[0]), float(res[0])
    if res1 >= tol:
        lam1, v1, res1 = _rayleigh_refine(A, v1, lam1, tol, 50)
    if res1 >= tol:
        raise NumericalError(f"principal eigenpair residual {res1:.3g} above {tol:g}")
    v1 = v1 / np.linalg.norm(v1)
    lam2, v2, res2 = float(ritz[1]), Q[:, 1], float(res[1])
    if res2 >= tol:
        lam2, v2, res2 = _rayleigh_refine(A, v2, lam2, tol, 50, deflate=v1)
    if res2 >= tol or lam2 > lam1 + tol:
        raise NumericalError(f"second eigenpair residual {res2:.3g} above {tol:g}")
    if np.sum(v1) < 0:
        v1 = -v1
    if np.min(v1) < -1e-8 * np.max(v1):
        raise NumericalError("principal eigenvector changed sign; pair not isolated")
    v1 = np.maximum(v1, 0.0)
    vec = (v1 / v1[iz]).reshape(values.shape)
    pg = float(xi[iz] - np.max(np.delete(xi, iz)))
    return SpectralResult(lam1, vec, lam2, lam1 - lam2, pg, max(res1, res2), box_radius, z1)


def potential_gap(field: PotentialField, t, z1, ball_radius: int) -> float:
    """xi(z1) minus the largest other value in the l1-ball of ball_radius.

    ``t`` is accepted for symmetry with the other diagnostics; the gap does
    not depend on it.
    """
    z1 = as_site(z1, field.d)
    if ball_radius < l1(z1):
        raise ContractError(f"z1 = {z1} lies outside the ball of radius {ball_radius}")
    coords, vals = field.ball(ball_radius)
    other = np.any(coords != np.asarray(z1), axis=1)
    if not other.any():
        raise ContractError("the ball holds no site besides z1")
    return float(field[z1] - vals[other].max())


def lower_bound_diagnostic(field: PotentialField, t: float, solve_result: SolveResult, psi_maxima) -> dict:
    """log U(t) against t Psi_t(Z1) - 2dt, raw and divided by r_t (soft check)."""
    from .scales import E_E, compute_scales, psi_slope

    z1 = tuple(psi_maxima.z1)
    n1 = l1(z1)
    slope = psi_slope(field.gamma, t) if n1 else 0.0
    psi1 = field.values_at(np.array([z1]), strict=False)[0] - n1 * slope
    log_mass = solve_result.log_mass_at(t)
    lower = t * psi1 - 2 * field.d * t
    excess = log_mass - lower
    r_t = compute_scales(field.gamma, field.d, t).r_t if t > E_E else None
    return {"t": float(t), "log_mass": float(log_mass), "lower": float(lower), "excess": float(excess),
            "r_t": r_t, "excess_over_rt": None if r_t is None else float(excess / r_t), "z1": list(z1)}

"""Scale functions, the concentration functional and its maximisers.

Psi_{t,c}(z) = xi(z) - |z| (log log t)/(gamma t) + c |z| / t.  Everything here
is linear in |z|, so a maximiser search is a scan of xi(z) - |z| * slope with

    slope = (log log t)/(gamma t) - c/t.

Finite boxes cannot certify a global maximiser deterministically, so every
search reports ``coverage_defect``: an upper bound on the probability that
some site outside the box beats the reported value.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CertificationError, ContractError, DomainError, ResourceError
from .field import PotentialField, as_site, l1

E_E = math.exp(math.e)
DEFAULT_EPSILON = 1e-3
DEFAULT_SLACK = 1e-2
SCAN_BUDGET = 4_000_000_000


class CoverageWarning(UserWarning):
    """The box may miss the true maximiser with probability above epsilon."""


def _check_t(t: float) -> None:
    if not t > E_E:
        raise DomainError(f"t must exceed e^e = {E_E:.6f}, got {t}")


@dataclass(frozen=True)
class ScaleSet:
    gamma: float
    d: int
    t: float
    r_t: float
    a_rt: float
    d_rt: float
    theta: float

    @property
    def slope(self) -> float:
        """Per-unit-|z| penalty of Psi_t."""
        return psi_slope(self.gamma, self.t)


def compute_scales(gamma: float, d: int, t: float) -> ScaleSet:
    _check_t(t)
    if gamma <= 0 or d < 1:
        raise DomainError("need gamma > 0 and d >= 1")
    lt = math.log(t)
    r = t * lt ** (1.0 / gamma - 1.0) / math.log(lt)
    if not r > 1.0:
        raise DomainError(f"r_t = {r} must exceed 1 for the centering scales")
    lr = d * math.log(r)
    a = lr ** (1.0 / gamma)
    dr = lr ** (1.0 / gamma - 1.0)
    theta = d ** (1.0 - 1.0 / gamma) / gamma
    return ScaleSet(float(gamma), int(d), float(t), r, a, dr, theta)


def psi_slope(gamma: float, t: float, c: float = 0.0) -> float:
    _check_t(t)
    return math.log(math.log(t)) / (gamma * t) - c / t


def psi(field: PotentialField, t: float, c: float, z) -> float:
    """Psi_{t,c}(z) on the stored box."""
    site = as_site(z, field.d)
    return field[site] - l1(site) * psi_slope(field.gamma, t, c)


def psi_values(field: PotentialField, t: float, c: float, coords, strict: bool = True) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, field.d)
    return field.values_at(coords, strict=strict) - np.abs(coords).sum(axis=1) * psi_slope(field.gamma, t, c)


def _ball_counts(d: int, ell: np.ndarray) -> np.ndarray:
    """Float ball cardinalities sum_k 2^k C(d,k) C(ell,k), vectorised in ell."""
    ell = np.asarray(ell, dtype=float)
    total = np.zeros_like(ell)
    binom = np.ones_like(ell)
    for k in range(d + 1):
        if k:
            binom = binom * (ell - k + 1) / k
        total += 2.0**k * math.comb(d, k) * np.where(ell >= k, binom, 0.0)
    return np.where(ell >= 0, total, 0.0)


def _log_tail(x: np.ndarray, gamma: float) -> np.ndarray:
    return -(np.maximum(x, 0.0) ** gamma)


def outside_mass_bound(d: int, gamma: float, radius: int, t: float, c: float, threshold: float,
                       slack: float = DEFAULT_SLACK) -> float:
    """Upper bound on P(some z outside {-R..R}^d has Psi_{t,c}(z) > threshold).

    Sums shell(l) * P(xi > threshold + l*s) over l > R, s = (log log t)/(gamma t) - c/t.
    Consecutive shells are grouped into blocks over which the exponent
    x^gamma grows by at most log(1 + slack); each block is bounded by its
    first term times the block size, so the result overshoots the exact
    shell sum by a factor of at most 1 + slack.  ``slack=0`` sums shell by
    shell.  Shells with l > R over-cover the complement of the cube, which
    keeps the result an upper bound for every d.
    """
    _check_t(t)
    s = psi_slope(gamma, t, c)
    if s <= 0 or not math.isfinite(threshold):
        return 0.0 if threshold == math.inf and s > 0 else 1.0
    start = radius + 1
    if threshold + start * s <= 0:
        return 1.0
    delta = math.log1p(slack) if slack > 0 else 0.0
    total = 0.0
    prev_term = math.inf
    lo = start
    batch = 4096
    while True:
        if delta > 0:
            u0 = (threshold + lo * s) ** gamma
            u = u0 + delta * np.arange(1, batch + 1)
            ends = np.ceil((u ** (1.0 / gamma) - threshold) / s)
            ends = np.maximum(ends, lo + np.arange(1, batch + 1))
            ends = np.maximum.accumulate(ends)
            starts = np.concatenate(([lo], ends[:-1]))
        else:
            starts = lo + np.arange(batch, dtype=float)
            ends = starts + 1
        counts = _ball_counts(d, ends - 1) - _ball_counts(d, starts - 1)
        with np.errstate(divide="ignore"):
            logs = np.log(counts) + _log_tail(threshold + starts * s, gamma)
        terms = np.exp(logs)
        csum = total + np.cumsum(terms)
        decreasing = np.concatenate(([terms[0] < prev_term], terms[1:] < terms[:-1]))
        stop = np.flatnonzero(decreasing & (terms <= 1e-16 * csum))
        if csum[-1] >= 1.0 and (not len(stop) or csum[stop[0]] >= 1.0):
            return 1.0
        if len(stop):
            return float(min(1.0, csum[stop[0]]))
        total = float(csum[-1])
        prev_term = terms[-1]
        lo = ends[-1]


@dataclass(frozen=True)
class PsiMaxima:
    z1: tuple
    z2: tuple
    psi1: float
    psi2: float
    c: float
    coverage_defect: float
    t: float = float("nan")
    radius: int = -1

    def to_dict(self) -> dict:
        out = asdict(self)
        out["z1"], out["z2"] = list(self.z1), list(self.z2)
        return out


def _warn_coverage(defect: float, epsilon: float) -> None:
    if defect > epsilon:
        warnings.warn(f"coverage defect {defect:.3g} exceeds epsilon {epsilon:g}; enlarge the box",
                      CoverageWarning, stacklevel=3)


def locate_maxima(field: PotentialField, t: float, c: float = 0.0,
                  epsilon: float = DEFAULT_EPSILON) -> PsiMaxima:
    """In-box argmax and second argmax of Psi_{t,c}, with a coverage bound."""
    _check_t(t)
    if field.size < 2:
        raise ContractError("need at least two sites to rank maximisers")
    psi1, z1, psi2, z2 = field.top2(psi_slope(field.gamma, t, c))
    defect = outside_mass_bound(field.d, field.gamma, field.radius, t, c, psi2)
    _warn_coverage(defect, epsilon)
    return PsiMaxima(z1, z2, psi1, psi2, float(c), defect, float(t), field.radius)


def default_radius(d: int, gamma: float, t: float) -> int:
    r_t = compute_scales(gamma, d, t).r_t
    return max(2, math.ceil((4.0 if d == 1 else 2.0) * r_t))


def locate_certified(d: int, gamma: float, seed: int, t: float, c: float = 0.0,
                     epsilon: float = DEFAULT_EPSILON, radius: int | None = None,
                     growth: float = 2.0, scan_budget: int = SCAN_BUDGET) -> tuple[PsiMaxima, PotentialField]:
    """Grow a seeded box until the top two maximisers are certified to epsilon.

    Growth rescans only the new annulus.  Returns the maxima and the lazy
    field covering the final box.
    """
    _check_t(t)
    if growth <= 1:
        raise DomainError("growth factor must exceed 1")
    r = default_radius(d, gamma, t) if radius is None else int(radius)
    slope = psi_slope(gamma, t, c)
    field = PotentialField.lazy(d, r, gamma, seed)
    state = field.top2(slope)
    while True:
        defect = outside_mass_bound(d, gamma, r, t, c, state[2])
        if defect <= epsilon:
            break
        r_new = max(r + 1, math.ceil(r * growth))
        if (2 * r_new + 1) ** d > scan_budget:
            raise ResourceError(f"certifying to {epsilon:g} needs a box beyond the scan budget")
        field = field.grow(r_new)
        state = field.top2(slope, r_in=r, state=state)
        r = r_new
    psi1, z1, psi2, z2 = state
    return PsiMaxima(z1, z2, psi1, psi2, float(c), defect, float(t), r), field


def _window_slope(sc: ScaleSet, alpha: float) -> float:
    return sc.slope + sc.d_rt * alpha / sc.r_t


def rescale_points(field: PotentialField, t: float, tau: float, alpha: float = 0.0):
    """Rescaled points (z / r_t, (Psi_t(z) - a_{r_t}) / d_{r_t}) with y >= alpha|x| + tau.

    Returns ``(x, y)`` with x of shape (n, d), in scan order.
    """
    sc = compute_scales(field.gamma, field.d, t)
    if not alpha > -sc.theta:
        raise DomainError(f"alpha must exceed -theta = {-sc.theta:.6g}")
    base = sc.a_rt + sc.d_rt * tau
    coords, vals = field.exceedances(base, _window_slope(sc, alpha))
    norms = np.abs(coords).sum(axis=1)
    x = coords / sc.r_t
    y = (vals - norms * sc.slope - sc.a_rt) / sc.d_rt
    keep = y >= alpha * norms / sc.r_t + tau
    return x[keep], y[keep]


def window_coverage_defect(d: int, gamma: float, radius: int, t: float, tau: float,
                           alpha: float = 0.0, slack: float = DEFAULT_SLACK) -> float:
    """Probability bound that the window {y >= alpha|x| + tau} has points outside the box."""
    sc = compute_scales(gamma, d, t)
    c = -t * sc.d_rt * alpha / sc.r_t
    return outside_mass_bound(d, gamma, radius, t, c, sc.a_rt + sc.d_rt * tau, slack)


def crossing_slope(x, gamma: float, c: float = 0.0):
    """h_c(x) = (log log x - gamma c)/(gamma x), the |z|-penalty of Psi_{x,c}."""
    x = np.asarray(x, dtype=float)
    return (np.log(np.log(x)) - gamma * c) / (gamma * x)


def _check_monotone(gamma: float, t: float, c: float) -> None:
    lt = math.log(t)
    if not math.log(lt) - gamma * c > 1.0 / lt:
        raise DomainError(f"crossing function is not monotone from t={t} for c={c}")


def crossing_times(target, gamma: float, lo: float, hi: float, c: float = 0.0,
                   rtol: float = 1e-12) -> np.ndarray:
    """Solve h_c(x) = target on [lo, hi] by bisection; NaN where no root lies in range."""
    target = np.atleast_1d(np.asarray(target, dtype=float))
    a = np.full(target.shape, float(lo))
    b = np.full(target.shape, float(hi))
    has_root = (crossing_slope(lo, gamma, c) >= target) & (crossing_slope(hi, gamma, c) <= target)
    while np.any(b - a > rtol * b):
        m = 0.5 * (a + b)
        above = crossing_slope(m, gamma, c) > target
        a = np.where(above, m, a)
        b = np.where(above, b, m)
    return np.where(has_root, b, np.nan)


def smallest_radius(defect, start: int, epsilon: float, growth: float = 2.0, max_grow: int = 60) -> int:
    """Smallest radius >= start (to within 0.1%) with defect(radius) <= epsilon.

    ``defect`` must be nonincreasing in the radius.  Grows geometrically,
    then bisects the last growth step.
    """
    if growth <= 1:
        raise DomainError("growth factor must exceed 1")
    lo, hi = start - 1, max(1, int(start))
    for _ in range(max_grow):
        if defect(hi) <= epsilon:
            break
        lo, hi = hi, max(hi + 1, math.ceil(hi * growth))
    else:
        raise CertificationError(f"defect above {epsilon:g} after {max_grow} growth steps")
    while hi - lo > max(1, hi // 1000):
        mid = (lo + hi) // 2
        if defect(mid) <= epsilon:
            hi = mid
        else:
            lo = mid
    return hi


def _first_overtake(field: PotentialField, z1, t: float, end: float, c: float) -> float:
    """First x in (t, end] at which some site overtakes z1 under Psi_{x,c}, minus t; inf if none.

    A site overtakes before ``end`` exactly when it beats z1 under Psi_{end,c},
    so one exceedance scan at that slope finds every candidate.
    """
    xi1, n1 = field[z1], l1(z1)
    slope_end = psi_slope(field.gamma, end, c)
    coords, vals = field.exceedances(xi1 - n1 * slope_end, slope_end)
    norms = np.abs(coords).sum(axis=1)
    cand = (norms > n1) & (vals > xi1)
    if not cand.any():
        return math.inf
    target = (vals[cand] - xi1) / (norms[cand] - n1)
    x = crossing_times(target, field.gamma, t, end, c)
    x = x[np.isfinite(x)]
    return float(x.min() - t) if len(x) else math.inf


def ageing_time(field: PotentialField, t: float, c: float = 0.0, horizon: float = math.inf,
                epsilon: float = DEFAULT_EPSILON) -> float:
    """Time s > 0 until the Psi_{.,c} maximiser first changes, or +inf beyond the horizon.

    Psi_x(z) - Psi_x(Z1) = dxi - dl h_c(x) is monotone in x for x > e^e, so
    only sites further out with larger potential can ever overtake, and each
    overtakes exactly once.
    """
    _check_t(t)
    _check_monotone(field.gamma, t, c)
    if not 0 < horizon < math.inf:
        raise DomainError("horizon must be positive and finite")
    best = locate_maxima(field, t, c, epsilon)
    z1 = best.z1
    xi1, n1 = field[z1], l1(z1)
    end = t + horizon
    psi_end = xi1 - n1 * psi_slope(field.gamma, end, c)
    defect = outside_mass_bound(field.d, field.gamma, field.radius, end, c, psi_end)
    if defect > epsilon:
        raise CertificationError(f"overtaking by t+horizon not certified: defect {defect:.3g} > {epsilon:g}")
    return _first_overtake(field, z1, t, end, c)


def ageing_time_certified(d: int, gamma: float, seed: int, t: float, horizon: float, c: float = 0.0,
                          epsilon: float = DEFAULT_EPSILON, growth: float = 2.0) -> tuple[float, int]:
    """Ageing time on a seeded field whose box is sized so overtaking by t + horizon is certified.

    The maximiser at t is certified first; the box for the overtaking scan
    is then the smallest one whose coverage bound at t + horizon, for the
    threshold Psi_{t+horizon}(z1), is within epsilon.  Returns (T, radius).
    """
    _check_monotone(gamma, t, c)
    if not 0 < horizon < math.inf:
        raise DomainError("horizon must be positive and finite")
    best, field = locate_certified(d, gamma, seed, t, c, epsilon, growth=growth)
    end = t + horizon
    psi_end = field[best.z1] - l1(best.z1) * psi_slope(gamma, end, c)
    r = smallest_radius(lambda r: outside_mass_bound(d, gamma, r, end, c, psi_end), best.radius,
                        epsilon, growth)
    return _first_overtake(field.grow(max(r, field.radius)), best.z1, t, end, c), max(r, field.radius)

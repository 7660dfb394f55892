"""Simulation of the limit Poisson process on truncated windows.

The intensity factorises: y - y_min is Exponential(gamma) and every
x-coordinate is Laplace(1/(gamma theta)), so a window {y >= y_min} is sampled
exactly.  For the stretched ranking s = y + c theta |x| (c = w/(1+w)) we also
sample the tilted window {s >= y_min, y < y_min}: under nu the points with
s >= a have total mass K (1+w)^d e^{-gamma a}, s - a is Exponential(gamma)
and the x-coordinates are Laplace((1+w)/(gamma theta)).  With both windows
present the y-argmax and the s-argmax are exact as soon as the y-window is
nonempty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, SamplingError
from .limits import LimitParams, intensity_tail, poisson_partial

DEPTH_STEP = 5.0
DEFAULT_MEAN_COUNT = 5.0
CERT_EPS = 1e-3


@dataclass(frozen=True)
class LimitPointSet:
    """Points of the limit process inside a window.

    Holds every point with y >= y_min and, when ``w_window`` is set, every
    point with y + c theta |x| >= y_min for c = w_window/(1 + w_window).
    """

    params: LimitParams
    y_min: float
    x: np.ndarray
    y: np.ndarray
    seed: int | None = None
    w_window: float | None = None

    def __len__(self):
        return len(self.y)

    @property
    def in_window(self) -> np.ndarray:
        return self.y >= self.y_min

    def tilted(self, w: float) -> np.ndarray:
        c = w / (1.0 + w)
        return self.y + c * self.params.theta * np.abs(self.x).sum(axis=1)


def default_y_min(params: LimitParams, mean_count: float = DEFAULT_MEAN_COUNT) -> float:
    """y_min with nu(R^d x (y_min, inf)) = mean_count."""
    return math.log(params.tail_constant / mean_count) / params.gamma


def _laplace(rng, scale, n, d):
    return rng.laplace(0.0, scale, size=(n, d))


def _trunc_exp(rng, rate, lo, hi, n):
    """Exponential(rate) shifted to lo and conditioned below hi."""
    if not math.isfinite(hi):
        return lo + rng.exponential(1.0 / rate, n)
    span = hi - lo
    u = rng.random(n)
    return lo - np.log1p(-u * -math.expm1(-rate * span)) / rate


def _y_strip(params, rng, lo, hi, s_cap=None, w=None):
    """Points with lo <= y < hi, optionally only those with tilted value < s_cap."""
    g, K = params.gamma, params.tail_constant
    mass = K * (math.exp(-g * lo) - (math.exp(-g * hi) if math.isfinite(hi) else 0.0))
    n = rng.poisson(mass)
    y = _trunc_exp(rng, g, lo, hi, n)
    x = _laplace(rng, 1.0 / params.rate, n, params.d)
    if s_cap is not None:
        c = w / (1.0 + w)
        keep = y + c * params.theta * np.abs(x).sum(axis=1) < s_cap
        x, y = x[keep], y[keep]
    return x, y


def _s_strip(params, rng, w, lo, hi, y_cap):
    """Points with lo <= y + c theta |x| < hi and y < y_cap."""
    g, K, d = params.gamma, params.tail_constant, params.d
    c = w / (1.0 + w)
    mass = K * (1.0 + w) ** d * (math.exp(-g * lo) - (math.exp(-g * hi) if math.isfinite(hi) else 0.0))
    n = rng.poisson(mass)
    s = _trunc_exp(rng, g, lo, hi, n)
    x = _laplace(rng, (1.0 + w) / params.rate, n, d)
    y = s - c * params.theta * np.abs(x).sum(axis=1)
    keep = y < y_cap
    return x[keep], y[keep]


def sample_limit_process(params: LimitParams, y_min: float, seed=None, w: float | None = None,
                         rng=None) -> LimitPointSet:
    """All points with y >= y_min; with ``w`` also the tilted window for that stretch."""
    if not math.isfinite(y_min):
        raise ContractError("y_min must be finite")
    rng = np.random.default_rng(seed) if rng is None else rng
    x, y = _y_strip(params, rng, y_min, math.inf)
    if w is not None:
        xt, yt = _s_strip(params, rng, w, y_min, math.inf, y_min)
        x, y = np.concatenate([x, xt]), np.concatenate([y, yt])
    order = np.argsort(-y, kind="stable")
    return LimitPointSet(params, float(y_min), x[order], y[order], seed, w)


def deepen(points: LimitPointSet, rng, step: float = DEPTH_STEP) -> LimitPointSet:
    """Extend the same realisation to y_min - step."""
    hi = points.y_min
    lo = hi - step
    p, w = points.params, points.w_window
    if w is None:
        xs, ys = _y_strip(p, rng, lo, hi)
    else:
        x1, y1 = _y_strip(p, rng, lo, hi, s_cap=hi, w=w)
        x2, y2 = _s_strip(p, rng, w, lo, hi, lo)
        xs, ys = np.concatenate([x1, x2]), np.concatenate([y1, y2])
    x = np.concatenate([points.x, xs])
    y = np.concatenate([points.y, ys])
    order = np.argsort(-y, kind="stable")
    return replace(points, y_min=lo, x=x[order], y=y[order])


def escape_measure(params: LimitParams, w: float, y_min: float, level: float) -> float:
    """nu of {y < y_min, y + c theta |x| >= level}: points a y-window misses
    that would beat tilted value ``level``."""
    g, th, K, d = params.gamma, params.theta, params.tail_constant, params.d
    if w == 0:
        return 0.0
    c = w / (1.0 + w)
    r0 = max(level - y_min, 0.0) / (c * th)
    s0 = g * th * r0
    a = math.exp(-g * level) * K * (1.0 + w) ** d * float(poisson_partial(s0 / (1.0 + w), d))
    b = math.exp(-g * y_min) * K * float(poisson_partial(s0, d))
    return max(a - b, 0.0)


def argmax_pair(points: LimitPointSet, w: float, params: LimitParams | None = None,
                eps: float = CERT_EPS):
    """Points maximising y and y + c theta |x|, and whether the window certifies both.

    Returns ``((x_y, y_y), (x_s, y_s), certified)``.
    """
    params = points.params if params is None else params
    if len(points) == 0:
        raise ContractError("argmax of an empty point set")
    inwin = points.in_window
    if not inwin.any():
        i = int(np.argmax(points.y))
        return (points.x[i], points.y[i]), (points.x[i], points.y[i]), False
    s = points.tilted(w)
    i = int(np.argmax(points.y))
    j = int(np.argmax(s))
    if points.w_window is not None and w <= points.w_window:
        certified = True
    else:
        certified = -math.expm1(-escape_measure(params, w, points.y_min, float(s[j]))) <= eps
    return (points.x[i], points.y[i]), (points.x[j], points.y[j]), bool(certified)


def _group_argmax(group: np.ndarray, value: np.ndarray, n_groups: int) -> np.ndarray:
    """Index of the largest value within each group, -1 for empty groups."""
    order = np.lexsort((value, group))
    last = np.full(n_groups, -1)
    last[group[order]] = order
    return last


def _tilted_escape(rng, params, w, y_min, s_best, mass):
    """Whether some point with y < y_min has y + c theta |x| > s_best, per sample.

    Tilted-window points above s_best number Poisson(mass e^{-gamma (s_best - y_min)})
    and sit at s_best + Exponential(gamma); a point escapes the y-window when
    its y = s - c theta |x| falls below y_min.
    """
    g, d, th = params.gamma, params.d, params.theta
    c = w / (1.0 + w)
    n = len(s_best)
    counts = rng.poisson(mass * np.exp(-g * (s_best - y_min)))
    grp = np.repeat(np.arange(n), counts)
    s = s_best[grp] + rng.exponential(1.0 / g, grp.size)
    x = rng.laplace(0.0, (1.0 + w) / params.rate, (grp.size, d))
    hit = s - c * th * np.abs(x).sum(axis=1) < y_min
    escaped = np.zeros(n, dtype=bool)
    escaped[grp[hit]] = True
    return escaped


def ageing_survival_mc(params: LimitParams, w: float, n_samples: int, seed: int,
                       y_min: float | None = None, batch: int = 50_000, max_depth: int = 20):
    """Monte Carlo estimate of 1 - F(w): the y-argmax also maximises y + c theta |x|.

    Returns ``(estimate, standard_error, certified_rate)``.
    """
    if not w > 0:
        raise ContractError("w must be positive")
    rng = np.random.default_rng(seed)
    y_min = default_y_min(params) if y_min is None else float(y_min)
    g, d, th = params.gamma, params.d, params.theta
    c = w / (1.0 + w)
    m_y = float(intensity_tail(y_min, params))
    m_s = m_y * (1.0 + w) ** d
    hits = certified = 0
    done = 0
    while done < n_samples:
        n = min(batch, n_samples - done)
        ny = rng.poisson(m_y, n)
        grp = np.repeat(np.arange(n), ny)
        y = y_min + rng.exponential(1.0 / g, grp.size)
        x = rng.laplace(0.0, 1.0 / params.rate, (grp.size, d))
        s = y + c * th * np.abs(x).sum(axis=1)
        ok = ny > 0
        iy = _group_argmax(grp, y, n)[ok]
        is_ = _group_argmax(grp, s, n)[ok]
        escaped = _tilted_escape(rng, params, w, y_min, s[is_], m_s)
        hits += int(np.sum((iy == is_) & ~escaped))
        certified += int(ok.sum())
        for _ in np.flatnonzero(~ok):
            # empty y-window: deepen this realisation's y-window, then draw the
            # tilted points below the new floor that could beat its tilted max
            pts = LimitPointSet(params, y_min, np.empty((0, d)), np.empty(0))
            for _ in range(max_depth):
                pts = deepen(pts, rng)
                if len(pts):
                    break
            if not len(pts):
                continue
            st = pts.tilted(w)
            j = int(np.argmax(st))
            mass = float(intensity_tail(pts.y_min, params)) * (1.0 + w) ** d
            esc = _tilted_escape(rng, params, w, pts.y_min, st[j:j + 1], mass)[0]
            hits += int(j == int(np.argmax(pts.y)) and not esc)
            certified += 1
        done += n
    if certified < 0.9 * n_samples:
        raise SamplingError(f"only {certified} of {n_samples} samples certified")
    p = hits / certified
    return p, math.sqrt(max(p * (1.0 - p), 0.0) / certified), certified / n_samples


def sample_top_two(params: LimitParams, seed=None, y_min: float | None = None, rng=None):
    """Top two points by y of one realisation: (x1, y1, x2, y2)."""
    rng = np.random.default_rng(seed) if rng is None else rng
    y_min = default_y_min(params) if y_min is None else y_min
    pts = sample_limit_process(params, y_min, rng=rng)
    while len(pts) < 2:
        pts = deepen(pts, rng)
    return pts.x[0], pts.y[0], pts.x[1], pts.y[1]


def sample_top_two_batch(params: LimitParams, n: int, seed: int, y_min: float | None = None):
    """``n`` independent top-two samples, vectorised.

    Returns arrays x1 (n, d), y1 (n,), x2 (n, d), y2 (n,).
    """
    rng = np.random.default_rng(seed)
    d = params.d
    y_min = default_y_min(params) if y_min is None else y_min
    counts = rng.poisson(float(intensity_tail(y_min, params)), n)
    grp = np.repeat(np.arange(n), counts)
    y = y_min + rng.exponential(1.0 / params.gamma, grp.size)
    x = rng.laplace(0.0, 1.0 / params.rate, (grp.size, d))
    order = np.lexsort((-y, grp))
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    x1 = np.empty((n, d)); y1 = np.empty(n)
    x2 = np.empty((n, d)); y2 = np.empty(n)
    ok = counts >= 2
    i1 = order[starts[ok]]
    i2 = order[starts[ok] + 1]
    x1[ok], y1[ok], x2[ok], y2[ok] = x[i1], y[i1], x[i2], y[i2]
    # short samples continue below y_min: in u = nu-tail(y) the points form a unit-rate Poisson process
    short = np.flatnonzero(~ok)
    u0 = float(intensity_tail(y_min, params))
    for k in short:
        sel = order[starts[k]:starts[k] + counts[k]]
        need = 2 - sel.size
        u = u0 + np.cumsum(rng.exponential(1.0, need))
        ys = np.concatenate((y[sel], np.log(params.tail_constant / u) / params.gamma))
        xs = np.concatenate((x[sel], rng.laplace(0.0, 1.0 / params.rate, (need, d))))
        x1[k], y1[k], x2[k], y2[k] = xs[0], ys[0], xs[1], ys[1]
    return x1, y1, x2, y2

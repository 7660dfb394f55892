"""Closed-form limit laws of the rescaled extremal process.

The limit point process lives on R^d x R with intensity

    nu(dx, dy) = gamma exp(-gamma (y + theta |x|)) dx dy,   theta = d^(1-1/gamma)/gamma.

Integrals over l1-shells use |{|x| <= s}| = (2s)^d / d!, so radial integrals
of exp(-b|x|) reduce to regularised upper incomplete gamma functions of
integer shape d, which are finite sums.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .errors import DomainError, NumericalError

W_INFINITY = math.inf


@dataclass(frozen=True)
class LimitParams:
    gamma: float
    d: int
    theta: float = field(init=False)

    def __post_init__(self):
        if not self.gamma > 0:
            raise DomainError(f"gamma must be positive, got {self.gamma}")
        if int(self.d) != self.d or self.d < 1:
            raise DomainError(f"d must be a positive integer, got {self.d}")
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "theta", self.d ** (1.0 - 1.0 / self.gamma) / self.gamma)

    @property
    def rate(self) -> float:
        """gamma * theta, the decay rate of the x-marginal."""
        return self.gamma * self.theta

    @property
    def tail_constant(self) -> float:
        """K with nu(R^d x (y, inf)) = K exp(-gamma y)."""
        return (2.0 / self.rate) ** self.d


def _norm1(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        return np.abs(x)
    return np.abs(x).sum(axis=-1)


def _out(v):
    v = np.asarray(v, dtype=float)
    return float(v) if v.ndim == 0 else v


def poisson_partial(s, n: int) -> np.ndarray:
    """e^{-s} sum_{k<n} s^k/k!, the regularised upper incomplete gamma Q(n, s)."""
    s = np.asarray(s, dtype=float)
    term = np.ones_like(s)
    total = np.ones_like(s)
    for k in range(1, n):
        term = term * s / k
        total = total + term
    return total * np.exp(-s)


def intensity_tail(y, params: LimitParams):
    """nu(R^d x (y, inf))."""
    return _out(params.tail_constant * np.exp(-params.gamma * np.asarray(y, dtype=float)))


def intensity_density(x, y, params: LimitParams):
    r = _norm1(x, params.d)
    return _out(params.gamma * np.exp(-params.gamma * (np.asarray(y, dtype=float) + params.theta * r)))


def density_p1(x, params: LimitParams):
    """Limit density of the rescaled localisation site."""
    d, g = params.d, params.gamma
    b = d ** (1.0 - 1.0 / g)
    return _out(b**d / 2.0**d * np.exp(-b * _norm1(x, d)))


def density_joint(x1, y1, x2, y2, params: LimitParams):
    """Joint density of the top two points (x1, y1), (x2, y2) ranked by y."""
    g, th, K = params.gamma, params.theta, params.tail_constant
    y1 = np.asarray(y1, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    r1, r2 = _norm1(x1, params.d), _norm1(x2, params.d)
    with np.errstate(over="ignore"):
        val = g * g * np.exp(-g * (y1 + y2 + th * r1 + th * r2) - K * np.exp(-g * y2))
    return _out(np.where(y1 > y2, val, 0.0))


def laplace_cdf(x, params: LimitParams):
    """CDF of one coordinate of the nu x-marginal (Laplace, scale 1/(gamma theta))."""
    x = np.asarray(x, dtype=float)
    e = 0.5 * np.exp(-params.rate * np.abs(x))
    return _out(np.where(x < 0, e, 1.0 - e))


def radial_cdf(r, params: LimitParams):
    """CDF of |x|_1 under p1: Erlang with shape d and rate gamma theta."""
    r = np.maximum(np.asarray(r, dtype=float), 0.0)
    return _out(1.0 - poisson_partial(params.rate * r, params.d))


def second_tail(q, params: LimitParams):
    """P(y2 > q) for the second-highest point: P(at least two points above q)."""
    u = intensity_tail(q, params)
    return _out(-np.expm1(-np.asarray(u)) - np.asarray(u) * np.exp(-np.asarray(u)))


def _laplace_mass(a: float, b: float, rate: float) -> float:
    """int_a^b exp(-rate |x|) dx."""
    def prim(x):
        return math.copysign(-math.expm1(-rate * abs(x)), x) / rate if math.isfinite(x) else math.copysign(1.0 / rate, x)
    return prim(b) - prim(a)


def nu_box(x_lo, x_hi, y_lo: float, y_hi: float, params: LimitParams) -> float:
    """nu of the rectangle prod_i [x_lo_i, x_hi_i] x [y_lo, y_hi]."""
    x_lo = np.broadcast_to(np.asarray(x_lo, dtype=float), (params.d,))
    x_hi = np.broadcast_to(np.asarray(x_hi, dtype=float), (params.d,))
    g = params.gamma
    ymass = math.exp(-g * y_lo) - (math.exp(-g * y_hi) if math.isfinite(y_hi) else 0.0)
    xmass = math.prod(_laplace_mass(a, b, params.rate) for a, b in zip(x_lo, x_hi))
    return ymass * xmass


def nu_window(tau: float, alpha: float, params: LimitParams) -> float:
    """nu({y >= alpha |x| + tau}), finite for alpha > -theta."""
    if not alpha > -params.theta:
        raise DomainError("alpha must exceed -theta")
    return math.exp(-params.gamma * tau) * (2.0 / (params.gamma * (params.theta + alpha))) ** params.d


def _dw_shape(s, w: float, d: int) -> np.ndarray:
    """nu(D_w) / nu(R^d x (y, inf)) as a function of s = gamma theta |x|."""
    s = np.asarray(s, dtype=float)
    term = np.ones_like(s)
    acc = np.zeros_like(s)
    for k in range(d):
        if k:
            term = term * s / k
        acc = acc + term * np.expm1((d - k) * math.log1p(w))
    return 1.0 + np.exp(-s) * acc


def nu_Dw(abs_x, y, w, params: LimitParams):
    """nu(D_w(x, y)) for the region that must stay empty for the maximiser to survive.

    D_w(x, y) = {y_bar + c theta |x_bar| >= y + c theta |x|} u {y_bar >= y},
    c = w/(1+w).  Pass ``w = W_INFINITY`` for the infinite-stretch limit.
    """
    abs_x = np.asarray(abs_x, dtype=float)
    if np.any(abs_x < 0):
        raise DomainError("abs_x must be nonnegative")
    if w < 0:
        raise DomainError("w must be nonnegative")
    if w == W_INFINITY:
        return _out(np.full(np.broadcast(abs_x, np.asarray(y)).shape, np.inf))
    tail = np.asarray(intensity_tail(y, params))
    return _out(tail * _dw_shape(params.rate * abs_x, w, params.d))


def ageing_cdf(w, params: LimitParams, quad_tol: float = 1e-10) -> float:
    """F(w) = 1 - int exp(-nu(D_w(x, y))) nu(dx, dy).

    The y-integral is done in closed form (it is a Laplace transform in
    u = K e^{-gamma y}), leaving

        1 - F(w) = int_0^inf s^(d-1)/(d-1)! e^{-s} / g_w(s) ds,

    with g_w = nu(D_w)/nu(R^d x (y, inf)).  The remaining integral is taken
    in u = e^{-s} over (0, 1).
    """
    if w == W_INFINITY:
        return 1.0
    if not w > 0:
        raise DomainError(f"w must be positive, got {w}")
    d = params.d
    fact = math.factorial(d - 1)

    def integrand(u):
        s = -math.log(u) if u > 0 else math.inf
        if not math.isfinite(s):
            return 0.0
        return s ** (d - 1) / fact / float(_dw_shape(s, w, d))

    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(integrand, 0.0, 1.0, epsabs=quad_tol, epsrel=quad_tol, limit=200)
        except integrate.IntegrationWarning as exc:
            raise NumericalError(f"quadrature for F({w}) did not converge: {exc}") from exc
    if err > max(quad_tol, 1e-14) * 10:
        raise NumericalError(f"quadrature error {err:.3g} above tolerance {quad_tol:g}")
    return float(min(1.0, max(0.0, 1.0 - val)))


def ageing_cdf_2d(w, params: LimitParams, quad_tol: float = 1e-8) -> float:
    """F(w) by direct two-dimensional quadrature over (|x|, y), no closed-form y step.

    Slower than :func:`ageing_cdf`; kept as an independent check.  Uses
    u = K e^{-gamma y} in (0, inf) and the l1-shell density of |x|.
    """
    if not w > 0:
        raise DomainError(f"w must be positive, got {w}")
    d, g, th, K = params.d, params.gamma, params.theta, params.tail_constant
    shell = 2.0**d / math.factorial(d - 1)

    def inner(u, r):
        y = -math.log(u / K) / g
        dens = g * math.exp(-g * (y + th * r)) * shell * r ** (d - 1)
        return math.exp(-float(nu_Dw(r, y, w, params))) * dens / (g * u)

    val, _ = integrate.dblquad(inner, 0.0, math.inf, 0.0, math.inf, epsabs=quad_tol, epsrel=quad_tol)
    return 1.0 - val


def _laguerre(n: int):
    nodes, weights = np.polynomial.laguerre.laggauss(n)
    return nodes, weights * np.exp(nodes)


def _orthant_grid(d: int, rate: float, nodes: int):
    """Points and weights integrating f(x) exp(-rate|x|)-like functions over R^d.

    Gauss-Laguerre in each coordinate of the positive orthant, scaled by
    1/rate, with the 2^d orthants folded in by symmetry in |x|.
    """
    t, w = _laguerre(nodes)
    pts = np.stack(np.meshgrid(*([t / rate] * d), indexing="ij"), axis=-1).reshape(-1, d)
    wts = np.prod(np.stack(np.meshgrid(*([w / rate] * d), indexing="ij"), axis=-1).reshape(-1, d), axis=1)
    return pts, wts * 2.0**d


def integrate_p1(params: LimitParams, nodes: int = 60) -> float:
    """Tensor Gauss-Laguerre quadrature of density_p1 over R^d."""
    pts, wts = _orthant_grid(params.d, params.d ** (1.0 - 1.0 / params.gamma), nodes)
    return float(np.sum(wts * density_p1(pts, params)))


def integrate_joint(params: LimitParams, x_nodes: int | None = None, y_nodes: int = 40) -> float:
    """Tensor quadrature of density_joint over (R^d x R)^2.

    x-vectors use the orthant Gauss-Laguerre grid; (y1, y2) are mapped to
    u = K e^{-gamma y2} and eta = y1 - y2, both Gauss-Laguerre on (0, inf).
    """
    d, g, K = params.d, params.gamma, params.tail_constant
    if x_nodes is None:
        x_nodes = {1: 12, 2: 6}.get(d, 3)
    pts, pw = _orthant_grid(d, params.rate, x_nodes)
    ty, wy = _laguerre(y_nodes)
    u, eta = ty[:, None], ty[None, :]
    y2 = -np.log(u / K) / g
    y1 = y2 + eta
    wuv = (wy[:, None] * wy[None, :]) / (g * u)
    shape = (len(ty), len(ty), len(pts))
    total = 0.0
    for x1, w1 in zip(pts, pw):
        vals = density_joint(np.broadcast_to(x1, shape + (d,)), np.broadcast_to(y1[..., None], shape),
                             np.broadcast_to(pts, shape + (d,)), np.broadcast_to(y2[..., None], shape), params)
        total += w1 * np.sum(vals * wuv[..., None] * pw)
    return float(total)

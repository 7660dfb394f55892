"""Goodness-of-fit tests and interval estimates used by the experiment runners.

P-values come from scipy's distributions; the statistics themselves are
computed here so that discrete references (point masses, Poisson counts)
are handled with left limits instead of the continuous-CDF shortcut.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats as sps

from .errors import ContractError

DEFAULT_ALPHA = 1e-3
MIN_EXPECTED = 5.0
MIN_SAMPLES = 5


@dataclass(frozen=True)
class StatReport:
    test: str
    statistic: float
    p_value: float | None
    n: int
    threshold: float
    verdict: bool
    ci: tuple | None = None
    detail: dict | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.ci is not None:
            out["ci"] = list(self.ci)
        return out


def _check_size(n: int) -> None:
    if n < MIN_SAMPLES:
        raise ContractError(f"need at least {MIN_SAMPLES} samples, got {n}")


def ks_distance(samples, cdf, cdf_left=None) -> float:
    """sup_x |F_n(x) - F(x)|, checking both one-sided limits at each sample.

    ``cdf_left`` gives F(x-) for references with atoms; it defaults to ``cdf``,
    which is exact for continuous references.
    """
    x = np.sort(np.asarray(samples, dtype=float).reshape(-1))
    n = len(x)
    if not n:
        raise ContractError("empty sample")
    ux, last = np.unique(x, return_index=False, return_counts=True)
    ecdf_hi = np.cumsum(last) / n
    ecdf_lo = ecdf_hi - last / n
    f_hi = np.asarray(cdf(ux), dtype=float)
    f_lo = np.asarray((cdf_left or cdf)(ux), dtype=float)
    return float(max(np.max(np.abs(ecdf_hi - f_hi)), np.max(np.abs(ecdf_lo - f_lo))))


def ks_test(samples, cdf, name: str = "ks", alpha: float = DEFAULT_ALPHA, cdf_left=None) -> StatReport:
    """Two-sided one-sample KS test; p-value from the exact finite-n law (continuous reference)."""
    samples = np.asarray(samples, dtype=float).reshape(-1)
    _check_size(len(samples))
    dist = ks_distance(samples, cdf, cdf_left)
    p = float(sps.kstwo.sf(dist, len(samples)))
    return StatReport(name, dist, p, len(samples), alpha, bool(p > alpha))


def _poisson_bins(mean: float, n: int, min_expected: float) -> list:
    """Upper ends of consecutive count bins, each expecting >= min_expected.

    The open upper tail beyond the last end is merged inward until it too
    meets the threshold.
    """
    edges = []
    acc = 0.0
    kmax = int(mean + 20 * math.sqrt(mean) + 20)
    for k in range(kmax):
        acc += n * sps.poisson.pmf(k, mean)
        if acc >= min_expected:
            edges.append(k)
            acc = 0.0
    while edges and n * sps.poisson.sf(edges[-1], mean) < min_expected:
        edges.pop()
    return edges


def chi2_poisson(counts, mean: float, name: str = "chi2_poisson", alpha: float = DEFAULT_ALPHA,
                 min_expected: float = MIN_EXPECTED) -> StatReport:
    """Chi-square GoF of integer counts against Poisson(mean), bins merged to expectation >= 5.

    Bins are {0..e0}, {e0+1..e1}, ..., plus the upper tail beyond the last
    end.  With fewer than two bins there is nothing to test; the report then
    has no p-value and a failing verdict.
    """
    counts = np.asarray(counts).reshape(-1)
    if not mean > 0:
        raise ContractError("Poisson mean must be positive (zero-variance reference)")
    if np.any(counts < 0) or np.any(counts != np.round(counts)):
        raise ContractError("counts must be nonnegative integers")
    n = len(counts)
    _check_size(n)
    edges = _poisson_bins(mean, n, min_expected)
    if len(edges) < 1:
        return StatReport(name, math.nan, None, n, alpha, False, detail={"bins": len(edges)})
    uppers = np.asarray(edges)
    lowers = np.concatenate(([0], uppers[:-1] + 1))
    cdf_hi = sps.poisson.cdf(uppers, mean)
    cdf_lo = np.where(lowers > 0, sps.poisson.cdf(lowers - 1, mean), 0.0)
    probs = np.append(cdf_hi - cdf_lo, sps.poisson.sf(uppers[-1], mean))
    obs = np.array([np.sum((counts >= a) & (counts <= b)) for a, b in zip(lowers, uppers)]
                   + [np.sum(counts > uppers[-1])], dtype=float)
    expected = n * probs
    stat = float(np.sum((obs - expected) ** 2 / expected))
    dof = len(obs) - 1
    p = float(sps.chi2.sf(stat, dof))
    return StatReport(name, stat, p, n, alpha, bool(p > alpha),
                      detail={"dof": dof, "observed": obs.tolist(), "expected": expected.tolist()})


def combine_chi2(reports, name: str = "chi2_combined", alpha: float = DEFAULT_ALPHA) -> StatReport:
    """Aggregate independent chi-square reports by summing statistics and degrees of freedom."""
    usable = [r for r in reports if r.p_value is not None]
    if not usable:
        # nothing testable: report an inconclusive failure rather than a pass
        return StatReport(name, math.nan, None, sum(r.n for r in reports), alpha, False,
                          detail={"dof": 0, "parts": 0})
    stat = math.fsum(r.statistic for r in usable)
    dof = sum(r.detail["dof"] for r in usable)
    p = float(sps.chi2.sf(stat, dof))
    return StatReport(name, stat, p, sum(r.n for r in usable), alpha, bool(p > alpha),
                      detail={"dof": dof, "parts": len(usable)})


def binomial_ci(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Clopper-Pearson interval for a binomial proportion."""
    if n < 1 or not 0 <= k <= n:
        raise ContractError(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")
    a = 1.0 - level
    lo = 0.0 if k == 0 else float(sps.beta.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(sps.beta.ppf(1 - a / 2, k + 1, n - k))
    return lo, hi


def binomial_check(k: int, n: int, reference: float, name: str = "binomial",
                   level: float = 0.95) -> StatReport:
    """Whether the reference proportion lies in the Clopper-Pearson interval of k/n."""
    if not 0.0 <= reference <= 1.0:
        raise ContractError("reference proportion must lie in [0, 1]")
    lo, hi = binomial_ci(k, n, level)
    return StatReport(name, k / n, None, n, level, bool(lo <= reference <= hi), ci=(lo, hi),
                      detail={"reference": reference})


def sign_balance(values, name: str = "sign_balance", z_max: float = 3.0) -> StatReport:
    """Mean of sign(values) within z_max standard errors of zero."""
    s = np.sign(np.asarray(values, dtype=float).reshape(-1))
    _check_size(len(s))
    se = float(np.std(s, ddof=1) / math.sqrt(len(s))) if len(s) > 1 else math.inf
    mean = float(s.mean())
    z = 0.0 if mean == 0.0 else (abs(mean) / se if se > 0 else math.inf)
    return StatReport(name, mean, None, len(s), z_max, bool(z <= z_max), detail={"z": z, "se": se})


def trend_check(values, name: str, strict: bool) -> StatReport:
    """Whether a sequence is (strictly) increasing; use negated values for decreasing checks."""
    v = np.asarray(values, dtype=float)
    diffs = np.diff(v)
    ok = bool(np.all(diffs > 0) if strict else np.all(diffs >= 0))
    return StatReport(name, float(diffs.min()) if len(diffs) else math.nan, None, len(v), 0.0, ok,
                      detail={"values": v.tolist(), "strict": strict})

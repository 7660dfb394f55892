"""Exit criteria of the build, each at its stated tolerance and runtime limit.

Every test records a PASS/FAIL line through the ``verdict`` fixture; the
lines are repeated in the terminal summary.
"""

import math
import time
import warnings

import numpy as np
import pytest
from scipy import stats as sps

from pamlab.experiments import ExperimentConfig, pointprocess_boxes_1d, replica_rows, run_experiment, summarise
from pamlab.field import (
    GeoPath, PotentialField, check_count_bound, count_bound, is_totally_disconnected, path_counters, sample_field,
    weibull_cdf,
)
from pamlab.limits import LimitParams, ageing_cdf, integrate_joint, integrate_p1, intensity_tail, nu_Dw
from pamlab.poisson import ageing_survival_mc
from pamlab.scales import CoverageWarning, ageing_time, crossing_slope
from pamlab.solver import feynman_kac_mc, principal_eigen, solve_pde
from pamlab.stats import ks_distance

pytestmark = pytest.mark.acceptance

BASE_SEED = 0


def _ks_critical(n, level=1e-3):
    return float(sps.kstwo.isf(level, n))


def test_c01_weibull_sampler_gof(verdict):
    start = time.perf_counter()
    rows = []
    ok = True
    for k, gamma in enumerate((0.5, 1.0, 1.5)):
        vals = sample_field(1, 50_000, gamma, seed=1000 + k).values.reshape(-1)[:100_000]
        dist = ks_distance(vals, lambda x, g=gamma: weibull_cdf(x, g))
        crit = _ks_critical(len(vals))
        rows.append(f"g={gamma}: D={dist:.4g} < {crit:.4g}")
        ok &= dist < crit
    elapsed = time.perf_counter() - start
    ok &= elapsed < 5.0
    assert verdict(1, "Weibull sampler KS", ok, "; ".join(rows) + f"; {elapsed:.2f}s < 5s"), rows


def _two_site_reduction(a, b, t):
    """Closed-form 2x2 exponential of the symmetric sector of the 3-site box (a, b, a).

    Starting from delta_0 the profile stays symmetric, so the dynamics live on
    span{e_0, (e_-1 + e_1)/sqrt 2} with matrix [[b-2, s], [s, a-2]], s = sqrt 2.
    Returns (u(t, 0), u(t, 1)).
    """
    p, q, s = b - 2.0, a - 2.0, math.sqrt(2.0)
    mean, half = (p + q) / 2, math.hypot((p - q) / 2, s)
    ch, sh = math.cosh(half * t), math.sinh(half * t)
    e = math.exp(mean * t)
    u0 = e * (ch + (p - q) / 2 / half * sh)
    u_sym = e * (s / half * sh)
    return u0, u_sym / s


def test_c02_solver_micro_oracles(verdict):
    start = time.perf_counter()
    notes = []
    # single site: u(t, 0) = exp((xi(0) - 2d) t)
    one = PotentialField.from_array(np.array([3.7]))
    ts = np.array([0.5, 1.0, 4.0, 10.0])
    res = solve_pde(one, 0, ts)
    err1 = float(np.max(np.abs(res.log_total_mass - (3.7 - 2.0) * ts) / np.abs((3.7 - 2.0) * ts)))
    ok = err1 < 1e-10
    notes.append(f"single-site rel err {err1:.2g}")
    # two-site closed form through the symmetric reduction
    a, b = 1.3, 2.9
    fld = PotentialField.from_array(np.array([a, b, a]))
    ts = np.array([0.3, 1.0, 3.0])
    res = solve_pde(fld, 1, ts, rel_tol=1e-10)
    err2 = 0.0
    for k, t in enumerate(ts):
        u0, u1 = _two_site_reduction(a, b, t)
        U = u0 + 2 * u1
        err2 = max(err2, abs(math.exp(res.log_total_mass[k]) / U - 1.0),
                   abs(res.mass_at(t, 0) - u0 / U) / (u0 / U), abs(res.mass_at(t, 1) - u1 / U) / (u1 / U))
    ok &= err2 < 1e-8
    notes.append(f"two-site rel err {err2:.2g}")
    # PDE vs Feynman-Kac, d=1, radius 5, t=2, 1e5 paths
    fld = sample_field(1, 5, 1.0, seed=7)
    t = 2.0
    pde = solve_pde(fld, 5, [t], rel_tol=1e-10)
    targets = [(z,) for z in range(-2, 3)]
    mc = feynman_kac_mc(fld, 5, t, 100_000, seed=11, targets=targets)
    U = math.exp(pde.log_total_mass[0])
    worst = abs(mc.total - U) / mc.total_se
    for z in targets:
        m, se = mc.targets[z]
        worst = max(worst, abs(m - U * pde.mass_at(t, z)) / se)
    ok &= worst <= 3.0
    notes.append(f"FK max |z-score| {worst:.2f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 30.0
    notes.append(f"{elapsed:.1f}s < 30s")
    assert verdict(2, "solver micro-oracles", ok, "; ".join(notes))


def test_c03_spectral_bound(verdict):
    start = time.perf_counter()
    worst_margin, worst_res = math.inf, 0.0
    for k in range(100):
        d = 1 if k % 2 == 0 else 2
        radius = 12 if d == 1 else 5
        fld = sample_field(d, radius, (0.5, 1.0, 2.0)[k % 3], seed=5000 + k)
        sp = principal_eigen(fld, radius, tol=1e-10)
        worst_margin = min(worst_margin, sp.lambda1 - (float(fld.values.max()) - 2 * d))
        worst_res = max(worst_res, sp.residual)
    elapsed = time.perf_counter() - start
    ok = worst_margin >= 0 and worst_res < 1e-8 and elapsed < 20.0
    assert verdict(3, "spectral Rayleigh-Ritz bound", ok,
                   f"min(lambda1 - ximax + 2d)={worst_margin:.3g}; max residual {worst_res:.2g}; {elapsed:.1f}s < 20s")


def test_c04_limit_normalisations(verdict):
    start = time.perf_counter()
    notes, ok = [], True
    for gamma, d in ((1.0, 1), (0.5, 1), (1.0, 2)):
        p = LimitParams(gamma, d)
        i1, i2 = integrate_p1(p), integrate_joint(p)
        ok &= abs(i1 - 1) <= 1e-6 and abs(i2 - 1) <= 1e-5
        notes.append(f"({gamma},{d}): p1-1={i1 - 1:.1e}, joint-1={i2 - 1:.1e}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 30.0
    assert verdict(4, "limit-law normalisations", ok, "; ".join(notes) + f"; {elapsed:.1f}s < 30s")


def _mc_tail(gamma, d, y, n, rng):
    """Importance-sampled nu(R^d x (y, inf)) with heavier-tailed proposals."""
    p = LimitParams(gamma, d)
    b = 2.0 / p.rate
    x = rng.laplace(0.0, b, (n, d))
    yy = y + rng.exponential(2.0 / gamma, n)
    q = np.prod(np.exp(-np.abs(x) / b) / (2 * b), axis=1) * (gamma / 2) * np.exp(-(gamma / 2) * (yy - y))
    f = gamma * np.exp(-gamma * (yy + p.theta * np.abs(x).sum(axis=1)))
    w = f / q
    return w.mean(), w.std() / math.sqrt(n)


def _mc_dw(gamma, d, abs_x, y, w, n, rng):
    """Importance-sampled nu(D_w): all (xb, yb) with yb >= min(y, y + c theta (|x| - |xb|))."""
    p = LimitParams(gamma, d)
    c = w / (1 + w)
    b = 2.0 / (p.rate * (1 - c))
    xb = rng.laplace(0.0, b, (n, d))
    r = np.abs(xb).sum(axis=1)
    low = np.minimum(y, y + c * p.theta * (abs_x - r))
    yb = low + rng.exponential(2.0 / gamma, n)
    q = np.prod(np.exp(-np.abs(xb) / b) / (2 * b), axis=1) * (gamma / 2) * np.exp(-(gamma / 2) * (yb - low))
    inside = (yb + c * p.theta * r >= y + c * p.theta * abs_x) | (yb >= y)
    f = gamma * np.exp(-gamma * (yb + p.theta * r)) * inside
    v = f / q
    return v.mean(), v.std() / math.sqrt(n)


def test_c05_nu_calculus_mc(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    notes = []
    for gamma, d, y in ((1.0, 1, 0.0), (0.5, 1, 1.0), (1.0, 2, -1.0), (2.0, 1, 0.5), (1.5, 2, 0.0)):
        est, se = _mc_tail(gamma, d, y, 2_000_000, rng)
        exact = intensity_tail(y, LimitParams(gamma, d))
        worst = max(worst, abs(est / exact - 1))
    notes.append(f"tail worst rel {worst:.2e}")
    worst_dw = 0.0
    for gamma, d, ax, y, w in ((1.0, 1, 1.0, 0.0, 1.0), (1.0, 1, 0.5, 0.5, 0.1), (0.5, 1, 2.0, -1.0, 10.0),
                               (1.0, 2, 1.0, 0.0, 1.0), (2.0, 2, 0.3, 0.2, 3.0)):
        est, se = _mc_dw(gamma, d, ax, y, w, 4_000_000, rng)
        exact = nu_Dw(ax, y, w, LimitParams(gamma, d))
        worst_dw = max(worst_dw, abs(est / exact - 1))
    notes.append(f"D_w worst rel {worst_dw:.2e}")
    elapsed = time.perf_counter() - start
    ok = worst <= 0.01 and worst_dw <= 0.01 and elapsed < 120
    assert verdict(5, "nu calculus vs MC", ok, "; ".join(notes) + f"; {elapsed:.1f}s < 120s")


def test_c06_ageing_cross_oracle(verdict):
    start = time.perf_counter()
    p = LimitParams(1.0, 1)
    notes, ok = [], True
    for k, w in enumerate((0.1, 1.0, 10.0)):
        est, se, _ = ageing_survival_mc(p, w, 100_000, seed=300 + k)
        ref = 1 - ageing_cdf(w, p)
        z = abs(est - ref) / se
        ok &= z <= 3.0
        notes.append(f"w={w}: {est:.4f} vs {ref:.4f} (z={z:.2f})")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 120
    assert verdict(6, "ageing MC vs quadrature", ok, "; ".join(notes) + f"; {elapsed:.1f}s < 120s")


def test_c07_point_process_poissonity(verdict, tmp_path):
    start = time.perf_counter()
    cfg = ExperimentConfig(kind="pointprocess", gamma=1.0, d=1, t_values=[1e8], replicas=200,
                           base_seed=BASE_SEED, boxes=pointprocess_boxes_1d())
    res = run_experiment(cfg, tmp_path)
    comb = res.per_t[0]["combined"]
    elapsed = time.perf_counter() - start
    ok = comb["p_value"] > 1e-3 and elapsed < 180
    assert verdict(7, "point-process chi2 vs Poisson", ok,
                   f"chi2={comb['statistic']:.2f}, dof={comb['detail']['dof']}, p={comb['p_value']:.3g}; "
                   f"{elapsed:.1f}s < 180s")


@pytest.mark.slow
def test_c08_scaling_trend(verdict, tmp_path):
    start = time.perf_counter()
    cfg = ExperimentConfig(kind="scaling", gamma=1.0, d=1, t_values=[1e4, 1e6, 1e8], replicas=500,
                           base_seed=BASE_SEED, limit_samples=100_000)
    res = run_experiment(cfg, tmp_path)
    ks = [p["ks"][0]["statistic"] for p in res.per_t]
    checks = {c.test: c for c in res.checks}
    trend = checks["ks_distance_nonincreasing"].verdict
    limit = checks["limit_top_two_ks_coord0"]
    ok = trend and limit.verdict
    elapsed = time.perf_counter() - start
    assert verdict(8, "scaling KS trend + limit KS", ok,
                   f"KS by t={', '.join(f'{v:.4f}' for v in ks)} (nonincreasing: {trend}); "
                   f"limit KS p={limit.p_value:.3g}; {elapsed:.0f}s")


LOCALISATION_BUDGET = 600.0


@pytest.mark.slow
def test_c09_localisation_trend(verdict):
    """Replicas run in order until done or the 10-minute limit is exceeded."""
    start = time.perf_counter()
    cfg = ExperimentConfig(kind="localisation", gamma=0.5, d=1, t_values=[50.0, 200.0, 800.0], replicas=100,
                           base_seed=BASE_SEED)
    rows, done = [], 0
    for i in range(cfg.replicas):
        rows.extend(replica_rows(cfg, i))
        done += 1
        if time.perf_counter() - start > LOCALISATION_BUDGET:
            break
    elapsed = time.perf_counter() - start
    frac = {t: np.mean([r["mass_fraction"] for r in rows if r["t"] == t]) for t in cfg.t_values}
    agree = {t: np.mean([r["argmax_agrees"] for r in rows if r["t"] == t]) for t in cfg.t_values}
    detail = (f"{done}/{cfg.replicas} replicas in {elapsed:.0f}s; mean fraction "
              + ", ".join(f"{frac[t]:.3f}" for t in cfg.t_values) + "; agreement "
              + ", ".join(f"{agree[t]:.2f}" for t in cfg.t_values))
    if done < cfg.replicas:
        assert verdict(9, "localisation trend", False, "runtime limit exceeded; " + detail)
    res = summarise(cfg, rows)
    ok = res.passed and elapsed < LOCALISATION_BUDGET
    assert verdict(9, "localisation trend", ok, detail)


def _argmax_track(vals, norms, gamma, times):
    psi = vals[None, :] - norms[None, :] * crossing_slope(times, gamma)[:, None]
    return np.argmax(psi, axis=1)


def _no_return(track) -> bool:
    seen = set()
    prev = track[0]
    for s in track[1:]:
        if s != prev:
            seen.add(prev)
            if s in seen:
                return False
            prev = s
    return True


def test_c10_no_return_and_count_bound(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(77)
    bad_return = bad_equiv = 0
    for k in range(10_000):
        d = 1 + k % 2
        radius = 15 if d == 1 else 5
        gamma = (0.5, 1.0, 2.0)[k % 3]
        side = 2 * radius + 1
        vals = (-np.log1p(-rng.random(side**d))) ** (1 / gamma)
        fld = PotentialField.from_array(vals.reshape((side,) * d), gamma=gamma)
        coords = np.stack(np.meshgrid(*([np.arange(-radius, radius + 1)] * d), indexing="ij"), -1).reshape(-1, d)
        norms = np.abs(coords).sum(axis=1)
        t = math.exp(math.e) * (1 + 100 * rng.random())
        times = t * np.geomspace(1, 1e3, 120)
        track = _argmax_track(vals, norms, gamma, times)
        bad_return += not _no_return(track)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CoverageWarning)
            T = ageing_time(fld, t, horizon=times[-1] - t, epsilon=1.0)
        s = times - t
        same = track == track[0]
        away = np.abs(s - T) > 1e-9 * t if math.isfinite(T) else np.ones_like(s, dtype=bool)
        bad_equiv += int(np.sum(((T > s) != same) & away))
    walk_rng = np.random.default_rng(78)
    steps = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]])
    bad_bound = bad_half = 0
    for _ in range(10_000):
        n = int(walk_rng.integers(0, 51))
        path = np.concatenate([np.zeros((1, 2), dtype=int), np.cumsum(steps[walk_rng.integers(0, 4, n)], axis=0)])
        A = set()
        for z in map(tuple, path[walk_rng.random(len(path)) < 0.5]):
            if is_totally_disconnected(A | {z}):
                A.add(z)
        bad_bound += not check_count_bound(GeoPath(path), A)
        c = path_counters(GeoPath(path), None, A)
        bad_half += c.n_plus > count_bound(GeoPath(path), A) + 0.5
    elapsed = time.perf_counter() - start
    ok = bad_return == 0 and bad_equiv == 0 and bad_bound == 0 and elapsed < 60
    assert verdict(10, "no-return and count bound", ok,
                   f"return violations {bad_return}, T_t equivalence violations {bad_equiv}, "
                   f"count-bound violations {bad_bound} (with +1/2 slack: {bad_half}); {elapsed:.1f}s < 60s")


def test_c11_determinism(verdict, tmp_path, monkeypatch):
    configs = [
        ExperimentConfig(kind="localisation", gamma=0.5, d=1, t_values=[20.0, 40.0], replicas=3, base_seed=5),
        ExperimentConfig(kind="scaling", gamma=1.0, d=1, t_values=[1e4, 1e5], replicas=20, base_seed=5,
                         limit_samples=1000),
        ExperimentConfig(kind="pointprocess", gamma=1.0, d=1, t_values=[1e5], replicas=20, base_seed=5,
                         boxes=pointprocess_boxes_1d()),
        ExperimentConfig(kind="ageing", gamma=1.0, d=1, t_values=[1e4], replicas=20, base_seed=5),
    ]
    same = []
    for cfg in configs:
        path = tmp_path / f"{cfg.kind}.json"
        cfg.save(path)
        a = run_experiment(ExperimentConfig.load(path), tmp_path / f"{cfg.kind}_a")
        monkeypatch.setenv("PAM_WORKERS", "2")
        b = run_experiment(ExperimentConfig.load(path), tmp_path / f"{cfg.kind}_b")
        monkeypatch.delenv("PAM_WORKERS")
        files_a = [(tmp_path / f"{cfg.kind}_a" / f).read_bytes() for f in ("rows.jsonl", "summary.json")]
        files_b = [(tmp_path / f"{cfg.kind}_b" / f).read_bytes() for f in ("rows.jsonl", "summary.json")]
        same.append(files_a == files_b and len(a.rows) == len(b.rows))
    assert verdict(11, "byte-identical re-runs", all(same),
                   ", ".join(f"{c.kind}={'ok' if s else 'differs'}" for c, s in zip(configs, same)))

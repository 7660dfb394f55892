"""Seeded ensemble experiments: configuration, replica runners, persistence, verdicts.

Every replica is a pure function of (config, replica index): its field seed
is ``derive_seed(base_seed, replica)``.  Rows are appended to a partial JSONL
file while the ensemble runs and rewritten sorted by (t, replica) at the end,
so a finished run is byte-identical across re-runs and worker counts.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import stats
from .errors import ContractError, PamError
from .field import PotentialField, derive_seed
from .limits import LimitParams, ageing_cdf, laplace_cdf, nu_box
from .poisson import sample_top_two_batch
from .scales import (
    E_E, DEFAULT_EPSILON, ageing_time_certified, compute_scales, locate_certified, psi_slope,
    rescale_points,
)
from .solver import solve_pde

SCHEMA_VERSION = 1
KINDS = ("localisation", "scaling", "pointprocess", "ageing")
MIN_BOX_MASS = 1e-3
SOLVE_PAD = 10
LIMIT_SEED_INDEX = 1 << 40


@dataclass
class ExperimentConfig:
    kind: str
    gamma: float
    d: int
    t_values: list
    replicas: int
    base_seed: int
    epsilon: float = DEFAULT_EPSILON
    growth: float = 2.0
    output_dir: str | None = None
    alpha_level: float = stats.DEFAULT_ALPHA
    schema_version: int = SCHEMA_VERSION
    # localisation
    method: str = "etd"
    rel_tol: float = 1e-6
    solve_margin: float = 1.1
    solve_radius: int | None = None
    # scaling
    limit_samples: int = 100_000
    # pointprocess
    tau: float = -1.0
    window_alpha: float = 0.0
    boxes: list = field(default_factory=list)
    # ageing
    w_grid: list = field(default_factory=lambda: [0.1, 1.0, 10.0])
    w_max: float = 20.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ContractError(f"unsupported schema version {self.schema_version}")
        if self.kind not in KINDS:
            raise ContractError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.gamma > 0 or int(self.d) != self.d or self.d < 1:
            raise ContractError("need gamma > 0 and integer d >= 1")
        if int(self.replicas) != self.replicas or self.replicas < 1:
            raise ContractError("replicas must be a positive integer")
        if not self.t_values or any(not t > E_E for t in self.t_values):
            raise ContractError(f"every t must exceed e^e = {E_E:.4f}")
        if list(self.t_values) != sorted(set(self.t_values)):
            raise ContractError("t_values must be strictly increasing")
        if not 0 < self.epsilon < 1 or not self.growth > 1:
            raise ContractError("need 0 < epsilon < 1 and growth > 1")
        if not 0 < self.alpha_level < 1:
            raise ContractError("alpha_level must lie in (0, 1)")
        if self.kind == "localisation" and self.solve_radius is not None and self.solve_radius < 0:
            raise ContractError("solve_radius must be nonnegative")
        if self.kind == "pointprocess":
            if not self.boxes:
                raise ContractError("pointprocess needs at least one box")
            for b in self.boxes:
                _check_box(b, self)
        if self.kind == "ageing":
            if not self.w_max > 0 or any(not 0 < w <= self.w_max for w in self.w_grid):
                raise ContractError("need 0 < w <= w_max for every grid point")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ContractError(f"unknown config keys: {unknown}")
        missing = [k for k in ("kind", "gamma", "d", "t_values", "replicas", "base_seed") if k not in data]
        if missing:
            raise ContractError(f"missing config keys: {missing}")
        return cls(**data)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ContractError("config must be a JSON object")
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())


def _check_box(box: dict, cfg: ExperimentConfig) -> None:
    keys = {"x_lo", "x_hi", "y_lo", "y_hi"}
    if not isinstance(box, dict) or set(box) != keys:
        raise ContractError(f"a box needs exactly the keys {sorted(keys)}")
    lo, hi = np.asarray(box["x_lo"], dtype=float), np.asarray(box["x_hi"], dtype=float)
    if lo.shape != (cfg.d,) or hi.shape != (cfg.d,) or np.any(lo >= hi):
        raise ContractError("box x-bounds must be d-vectors with x_lo < x_hi")
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ContractError("box x-bounds must be finite")
    y_hi = math.inf if box["y_hi"] is None else box["y_hi"]
    if not box["y_lo"] < y_hi:
        raise ContractError("box needs y_lo < y_hi")
    # the box must sit inside the window {y >= alpha |x| + tau}
    far = np.maximum(np.abs(lo), np.abs(hi)).sum()
    near = np.where((lo < 0) & (hi > 0), 0.0, np.minimum(np.abs(lo), np.abs(hi))).sum()
    worst = cfg.window_alpha * (far if cfg.window_alpha > 0 else near)
    if box["y_lo"] < cfg.tau + worst:
        raise ContractError(f"box {box} leaves the window y >= {cfg.window_alpha}|x| + {cfg.tau}")
    mass = box_mass(box, cfg)
    if mass < MIN_BOX_MASS:
        raise ContractError(f"box {box} has limit mass {mass:.3g} < {MIN_BOX_MASS:g}; untestable")


def box_mass(box: dict, cfg: ExperimentConfig) -> float:
    y_hi = math.inf if box["y_hi"] is None else box["y_hi"]
    return nu_box(box["x_lo"], box["x_hi"], box["y_lo"], y_hi, LimitParams(cfg.gamma, cfg.d))


def _in_box(x, y, box) -> np.ndarray:
    lo, hi = np.asarray(box["x_lo"]), np.asarray(box["x_hi"])
    y_hi = math.inf if box["y_hi"] is None else box["y_hi"]
    return np.all((x >= lo) & (x < hi), axis=1) & (y >= box["y_lo"]) & (y < y_hi)


# replica runners: each returns a list of row dicts for one replica


def _base_row(cfg, replica, seed, t):
    return {"t": float(t), "replica": replica, "base_seed": cfg.base_seed, "derived_seed": seed}


def _box_maxima(field: PotentialField, radius: int, t: float):
    """Top two Psi_t maximisers restricted to the cube of the given radius."""
    if radius == 0:
        return (0,) * field.d, None
    _, z1, _, z2 = field.grow(radius).top2(psi_slope(field.gamma, t))
    return z1, z2


def _localisation_rows(cfg: ExperimentConfig, replica: int) -> list:
    seed = derive_seed(cfg.base_seed, replica)
    if cfg.solve_radius is None:
        located = [locate_certified(cfg.d, cfg.gamma, seed, t, epsilon=cfg.epsilon, growth=cfg.growth)[0]
                   for t in cfg.t_values]
        reach = max(max(abs(c) for c in m.z1) for m in located)
        radius = math.ceil(cfg.solve_margin * reach) + SOLVE_PAD
        pairs = [(m.z1, m.z2) for m in located]
    else:
        radius = int(cfg.solve_radius)
        base = PotentialField.lazy(cfg.d, radius, cfg.gamma, seed)
        pairs = [_box_maxima(base, radius, t) for t in cfg.t_values]
    fld = PotentialField.lazy(cfg.d, radius, cfg.gamma, seed)
    res = solve_pde(fld, radius, cfg.t_values, rel_tol=cfg.rel_tol, method=cfg.method)
    rows = []
    for k, t in enumerate(cfg.t_values):
        z1, z2 = pairs[k]
        frac = res.mass_at(t, z1)
        top2 = frac + (res.mass_at(t, z2) if z2 is not None else 0.0)
        rows.append(_base_row(cfg, replica, seed, t) | {
            "z1": list(z1), "z2": None if z2 is None else list(z2), "solve_radius": radius,
            "mass_fraction": frac, "top_two_fraction": top2,
            "argmax_site": list(res.argmax_site[k]), "argmax_agrees": bool(tuple(res.argmax_site[k]) == tuple(z1)),
            "log_total_mass": float(res.log_total_mass[k])})
    return rows


def _scaling_rows(cfg: ExperimentConfig, replica: int) -> list:
    seed = derive_seed(cfg.base_seed, replica)
    rows = []
    for t in cfg.t_values:
        m, _ = locate_certified(cfg.d, cfg.gamma, seed, t, epsilon=cfg.epsilon, growth=cfg.growth)
        r_t = compute_scales(cfg.gamma, cfg.d, t).r_t
        rows.append(_base_row(cfg, replica, seed, t) | {
            "z1": list(m.z1), "x": [c / r_t for c in m.z1], "psi1": m.psi1,
            "radius": m.radius, "coverage_defect": m.coverage_defect})
    return rows


def box_scan_radius(cfg: ExperimentConfig, t: float) -> int:
    """Cube radius holding every site whose rescaled position can fall in a test box."""
    r_t = compute_scales(cfg.gamma, cfg.d, t).r_t
    reach = max(max(abs(v) for v in b["x_lo"] + b["x_hi"]) for b in cfg.boxes)
    return math.ceil(reach * r_t) + 1


def _pointprocess_rows(cfg: ExperimentConfig, replica: int) -> list:
    # boxes are bounded in x, so scanning the cube they span gives exact counts
    seed = derive_seed(cfg.base_seed, replica)
    rows = []
    for t in cfg.t_values:
        r = box_scan_radius(cfg, t)
        x, y = rescale_points(PotentialField.lazy(cfg.d, r, cfg.gamma, seed), t, cfg.tau, cfg.window_alpha)
        counts = [int(np.sum(_in_box(x, y, b))) for b in cfg.boxes]
        rows.append(_base_row(cfg, replica, seed, t) | {"counts": counts, "radius": r})
    return rows


def _ageing_rows(cfg: ExperimentConfig, replica: int) -> list:
    seed = derive_seed(cfg.base_seed, replica)
    rows = []
    for t in cfg.t_values:
        T, r = ageing_time_certified(cfg.d, cfg.gamma, seed, t, cfg.w_max * t, epsilon=cfg.epsilon,
                                     growth=cfg.growth)
        censored = not math.isfinite(T)
        rows.append(_base_row(cfg, replica, seed, t) | {
            "w": None if censored else T / t, "censored": censored, "radius": r})
    return rows


RUNNERS = {
    "localisation": _localisation_rows,
    "scaling": _scaling_rows,
    "pointprocess": _pointprocess_rows,
    "ageing": _ageing_rows,
}


def replica_rows(cfg: ExperimentConfig, replica: int) -> list:
    try:
        return RUNNERS[cfg.kind](cfg, replica)
    except PamError as exc:
        seed = derive_seed(cfg.base_seed, replica)
        raise type(exc)(f"replica {replica} (seed {seed}): {exc}") from exc


def _replica_job(args):
    cfg_dict, replica = args
    return replica_rows(ExperimentConfig.from_dict(cfg_dict), replica)


def workers() -> int:
    try:
        return max(1, int(os.environ.get("PAM_WORKERS", "1")))
    except ValueError as exc:
        raise ContractError("PAM_WORKERS must be an integer") from exc


def _dump_row(row: dict) -> str:
    return json.dumps(row, sort_keys=True, allow_nan=False)


def collect_rows(cfg: ExperimentConfig, partial_path=None) -> list:
    """All rows of the ensemble sorted by (t, replica); optionally streamed to a partial file."""
    jobs = [(cfg.to_dict(), i) for i in range(cfg.replicas)]
    sink = open(partial_path, "w") if partial_path is not None else None
    rows = []
    try:
        n = min(workers(), cfg.replicas)
        if n > 1:
            with ProcessPoolExecutor(n) as pool:
                chunks = pool.map(_replica_job, jobs)
                for chunk in chunks:
                    rows.extend(chunk)
                    if sink:
                        sink.writelines(_dump_row(r) + "\n" for r in chunk)
                        sink.flush()
        else:
            for job in jobs:
                chunk = _replica_job(job)
                rows.extend(chunk)
                if sink:
                    sink.writelines(_dump_row(r) + "\n" for r in chunk)
                    sink.flush()
    finally:
        if sink:
            sink.close()
    rows.sort(key=lambda r: (r["t"], r["replica"]))
    return rows


# summaries


def _by_t(rows):
    out = {}
    for r in rows:
        out.setdefault(r["t"], []).append(r)
    return out


def _summary_localisation(cfg, rows):
    groups = _by_t(rows)
    per_t = []
    for t, rs in groups.items():
        frac = np.array([r["mass_fraction"] for r in rs])
        agree = np.array([r["argmax_agrees"] for r in rs])
        per_t.append({"t": t, "mean_fraction": float(frac.mean()),
                      "se_fraction": float(frac.std(ddof=1) / math.sqrt(len(frac))) if len(frac) > 1 else None,
                      "agreement": float(agree.mean()),
                      "agreement_ci": list(stats.binomial_ci(int(agree.sum()), len(agree))),
                      "mean_top_two_fraction": float(np.mean([r["top_two_fraction"] for r in rs]))})
    checks = [stats.trend_check([p["mean_fraction"] for p in per_t], "mean_fraction_increasing", strict=True),
              stats.trend_check([p["agreement"] for p in per_t], "agreement_nondecreasing", strict=False)]
    return per_t, checks


def _summary_scaling(cfg, rows):
    params = LimitParams(cfg.gamma, cfg.d)
    cdf = lambda x: laplace_cdf(x, params)
    per_t, dists = [], []
    for t, rs in _by_t(rows).items():
        x = np.array([r["x"] for r in rs])
        reports = [stats.ks_test(x[:, k], cdf, f"ks_coord{k}", cfg.alpha_level) for k in range(cfg.d)]
        dists.append(max(r.statistic for r in reports))
        per_t.append({"t": t, "ks": [r.to_dict() for r in reports],
                      "sign_balance": [stats.sign_balance(x[:, k], f"sign_coord{k}").to_dict() for k in range(cfg.d)]})
    x_all = np.array([r["x"] for r in rows])
    checks = [stats.trend_check([-v for v in dists], "ks_distance_nonincreasing", strict=False)]
    checks += [stats.sign_balance(x_all[:, k], f"sign_balance_coord{k}") for k in range(cfg.d)]
    x1, _, _, _ = sample_top_two_batch(params, cfg.limit_samples, derive_seed(cfg.base_seed, LIMIT_SEED_INDEX))
    checks += [stats.ks_test(x1[:, k], cdf, f"limit_top_two_ks_coord{k}", cfg.alpha_level) for k in range(cfg.d)]
    return per_t, checks


def _summary_pointprocess(cfg, rows):
    masses = [box_mass(b, cfg) for b in cfg.boxes]
    per_t, checks = [], []
    for t, rs in _by_t(rows).items():
        counts = np.array([r["counts"] for r in rs])
        box_reports = [stats.chi2_poisson(counts[:, i], masses[i], f"chi2_box{i}", cfg.alpha_level)
                       for i in range(len(masses))]
        combined = stats.combine_chi2(box_reports, f"chi2_combined_t{t:g}", cfg.alpha_level)
        corr = None
        if counts.shape[1] > 1 and len(counts) > 2 and np.all(counts.std(axis=0) > 0):
            c = np.corrcoef(counts.T)
            corr = c[np.triu_indices_from(c, 1)].tolist()
        per_t.append({"t": t, "nu": masses, "mean_counts": counts.mean(axis=0).tolist(),
                      "boxes": [r.to_dict() for r in box_reports], "combined": combined.to_dict(),
                      "correlations": corr, "correlation_bound": 3.0 / math.sqrt(len(counts))})
        checks.append(combined)
    return per_t, checks


def _summary_ageing(cfg, rows):
    params = LimitParams(cfg.gamma, cfg.d)
    per_t, checks = [], []
    for t, rs in _by_t(rows).items():
        n = len(rs)
        ws = np.array([math.inf if r["censored"] else r["w"] for r in rs])
        censored = int(np.sum(~np.isfinite(ws)))
        grid = []
        for w in cfg.w_grid:
            k = int(np.sum(ws > w))
            rep = stats.binomial_check(k, n, 1.0 - ageing_cdf(w, params), f"survival_w{w:g}")
            grid.append({"w": w, "survival": k / n, "limit_survival": 1.0 - ageing_cdf(w, params),
                         "ci": list(rep.ci), "limit_in_ci": rep.verdict})
        per_t.append({"t": t, "n": n, "censored": censored, "min_w": float(ws.min()), "grid": grid})
        checks.append(stats.StatReport(f"all_positive_t{t:g}", float(ws.min()), None, n, 0.0, bool(ws.min() > 0)))
        checks.append(stats.StatReport(f"censoring_below_10pct_t{t:g}", censored / n, None, n, 0.1,
                                       bool(censored / n < 0.1)))
        checks.append(stats.trend_check([-g["survival"] for g in grid], f"survival_nonincreasing_t{t:g}",
                                        strict=False))
    return per_t, checks


SUMMARIES = {
    "localisation": _summary_localisation,
    "scaling": _summary_scaling,
    "pointprocess": _summary_pointprocess,
    "ageing": _summary_ageing,
}


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list
    per_t: list
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.verdict for c in self.checks)

    def summary(self) -> dict:
        return {"kind": self.config.kind, "schema_version": SCHEMA_VERSION, "config": self.config.to_dict(),
                "n_rows": len(self.rows), "per_t": self.per_t, "checks": [c.to_dict() for c in self.checks],
                "passed": self.passed}


def summarise(cfg: ExperimentConfig, rows: list) -> ExperimentResult:
    per_t, checks = SUMMARIES[cfg.kind](cfg, rows)
    return ExperimentResult(cfg, rows, per_t, checks)


def _flat(value):
    return json.dumps(value) if isinstance(value, (list, dict)) else value


def write_outputs(result: ExperimentResult, out_dir) -> dict:
    """rows.jsonl (sorted), rows.csv derived from it, summary.json; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"jsonl": out / "rows.jsonl", "csv": out / "rows.csv", "summary": out / "summary.json"}
    with open(paths["jsonl"], "w") as fh:
        fh.writelines(_dump_row(r) + "\n" for r in result.rows)
    keys = sorted({k for r in result.rows for k in r})
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for r in result.rows:
            writer.writerow({k: _flat(r.get(k)) for k in keys})
    paths["summary"].write_text(json.dumps(_clean(result.summary()), indent=2, sort_keys=True) + "\n")
    return paths


def _clean(obj):
    """Replace non-finite floats with None so the summary stays strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> ExperimentResult:
    out = output_dir if output_dir is not None else cfg.output_dir
    partial = None
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        partial = Path(out) / "rows.partial.jsonl"
    rows = collect_rows(cfg, partial)
    result = summarise(cfg, rows)
    if out is not None:
        write_outputs(result, out)
        partial.unlink()
    return result


def run_localisation(cfg: ExperimentConfig, output_dir=None) -> ExperimentResult:
    return run_experiment(_expect(cfg, "localisation"), output_dir)


def run_scaling(cfg: ExperimentConfig, output_dir=None) -> ExperimentResult:
    return run_experiment(_expect(cfg, "scaling"), output_dir)


def run_pointprocess(cfg: ExperimentConfig, output_dir=None) -> ExperimentResult:
    return run_experiment(_expect(cfg, "pointprocess"), output_dir)


def run_ageing(cfg: ExperimentConfig, output_dir=None) -> ExperimentResult:
    return run_experiment(_expect(cfg, "ageing"), output_dir)


def _expect(cfg, kind):
    if cfg.kind != kind:
        raise ContractError(f"config is for {cfg.kind!r}, not {kind!r}")
    return cfg


def pointprocess_boxes_1d(y_lo: float = -1.0) -> list:
    """Four disjoint x-bands of the default d=1 window, all with y >= y_lo."""
    edges = [-1.0, -0.25, 0.0, 0.25, 1.0]
    return [{"x_lo": [a], "x_hi": [b], "y_lo": y_lo, "y_hi": None} for a, b in zip(edges[:-1], edges[1:])]

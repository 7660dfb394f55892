import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pamlab import experiments as ex
from pamlab.errors import CertificationError, ContractError
from pamlab.experiments import (
    ExperimentConfig, box_mass, collect_rows, pointprocess_boxes_1d, replica_rows, run_ageing, run_experiment,
    run_localisation, run_pointprocess, run_scaling, summarise,
)
from pamlab.field import PotentialField, derive_seed
from pamlab.limits import LimitParams, intensity_tail
from pamlab.scales import ageing_time_certified, compute_scales, locate_certified, rescale_points


def _cfg(**kw):
    base = dict(kind="scaling", gamma=1.0, d=1, t_values=[1e3, 1e4], replicas=4, base_seed=3)
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_roundtrip(tmp_path):
    cfg = _cfg(kind="pointprocess", boxes=pointprocess_boxes_1d(), tau=-1.0)
    assert ExperimentConfig.loads(cfg.dumps()) == cfg
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg
    assert ExperimentConfig.load(tmp_path / "c.json").dumps() == cfg.dumps()


@given(st.sampled_from(["scaling", "ageing", "localisation"]), st.floats(0.2, 5), st.integers(1, 3),
       st.lists(st.floats(16, 1e12), min_size=1, max_size=4, unique=True), st.integers(1, 1000),
       st.integers(0, 2**63), st.floats(1e-9, 0.5), st.floats(1.01, 10))
@settings(max_examples=60)
def test_config_roundtrip_property(kind, gamma, d, ts, replicas, seed, eps, growth):
    cfg = _cfg(kind=kind, gamma=gamma, d=d, t_values=sorted(ts), replicas=replicas, base_seed=seed,
               epsilon=eps, growth=growth)
    assert ExperimentConfig.loads(cfg.dumps()) == cfg


@pytest.mark.parametrize("change", [
    {"t_values": [10.0]}, {"t_values": [1e4, 1e3]}, {"t_values": [1e3, 1e3]}, {"t_values": []},
    {"replicas": 0}, {"replicas": 1.5}, {"kind": "plotting"}, {"gamma": 0.0}, {"d": 0},
    {"epsilon": 0.0}, {"growth": 1.0}, {"schema_version": 2},
])
def test_config_rejects(change):
    with pytest.raises(ContractError):
        _cfg(**change)


def test_config_strict_keys():
    data = _cfg().to_dict()
    with pytest.raises(ContractError):
        ExperimentConfig.from_dict(data | {"colour": "red"})
    del data["base_seed"]
    with pytest.raises(ContractError):
        ExperimentConfig.from_dict(data)
    with pytest.raises(ContractError):
        ExperimentConfig.loads("[1, 2]")


def test_pointprocess_box_validation():
    ok = {"x_lo": [-1.0], "x_hi": [1.0], "y_lo": 0.0, "y_hi": None}
    _cfg(kind="pointprocess", boxes=[ok])
    with pytest.raises(ContractError):
        _cfg(kind="pointprocess", boxes=[])
    with pytest.raises(ContractError):
        _cfg(kind="pointprocess", boxes=[ok | {"y_lo": 9.0}])  # mass below 1e-3
    with pytest.raises(ContractError):
        _cfg(kind="pointprocess", boxes=[ok | {"y_lo": -2.0}])  # below the window
    with pytest.raises(ContractError):
        _cfg(kind="pointprocess", boxes=[ok | {"x_hi": [math.inf]}])
    with pytest.raises(ContractError):
        _cfg(kind="pointprocess", boxes=[ok | {"x_hi": [-2.0]}])
    with pytest.raises(ContractError):
        _cfg(kind="pointprocess", boxes=[{"x_lo": [-1.0], "x_hi": [1.0], "y_lo": 0.0}])
    with pytest.raises(ContractError):
        _cfg(kind="pointprocess", window_alpha=0.5, boxes=[ok | {"y_lo": -0.8}])  # corners dip below 0.5|x| - 1


def test_ageing_grid_validation():
    with pytest.raises(ContractError):
        _cfg(kind="ageing", w_grid=[0.5, 30.0], w_max=20.0)
    with pytest.raises(ContractError):
        _cfg(kind="ageing", w_grid=[0.0])


def test_box_mass():
    cfg = _cfg(kind="pointprocess", boxes=pointprocess_boxes_1d())
    total = sum(box_mass(b, cfg) for b in cfg.boxes)
    tail = intensity_tail(-1.0, LimitParams(1.0, 1))
    assert total == pytest.approx(tail * (1 - math.exp(-1.0)))


def test_localisation_radius_zero_fraction_one():
    cfg = _cfg(kind="localisation", gamma=0.5, t_values=[20.0, 40.0], replicas=3, solve_radius=0)
    for r in range(3):
        for row in replica_rows(cfg, r):
            assert row["mass_fraction"] == pytest.approx(1.0, abs=1e-12)
            assert row["argmax_agrees"] and row["z1"] == [0]


def test_localisation_rows():
    cfg = _cfg(kind="localisation", gamma=1.0, t_values=[20.0, 60.0], replicas=2)
    res = run_localisation(cfg)
    assert len(res.rows) == 4
    for row in res.rows:
        assert {"t", "replica", "base_seed", "derived_seed"} <= set(row)
        assert row["derived_seed"] == derive_seed(3, row["replica"])
        assert 0 <= row["mass_fraction"] <= row["top_two_fraction"] <= 1 + 1e-9
        best, _ = locate_certified(1, 1.0, row["derived_seed"], row["t"])
        assert row["z1"] == list(best.z1)
    assert [c.test for c in res.checks] == ["mean_fraction_increasing", "agreement_nondecreasing"]


def test_localisation_explicit_radius_uses_box_maximiser():
    cfg = _cfg(kind="localisation", t_values=[30.0], replicas=2, solve_radius=6)
    for row in collect_rows(cfg):
        fld = PotentialField.lazy(1, 6, 1.0, row["derived_seed"])
        vals = fld.values - np.abs(np.arange(-6, 7)) * math.log(math.log(30.0)) / 30.0
        assert row["z1"] == [int(np.argmax(vals)) - 6]
        assert row["solve_radius"] == 6


def test_scaling_rows_and_checks():
    cfg = _cfg(replicas=30, limit_samples=5000)
    res = run_scaling(cfg)
    for row in res.rows:
        r_t = compute_scales(1.0, 1, row["t"]).r_t
        assert row["x"] == [row["z1"][0] / r_t]
        assert row["coverage_defect"] <= cfg.epsilon
    names = [c.test for c in res.checks]
    assert names == ["ks_distance_nonincreasing", "sign_balance_coord0", "limit_top_two_ks_coord0"]


def test_pointprocess_counts_match_direct_scan():
    boxes = [{"x_lo": [-1.0], "x_hi": [0.0], "y_lo": -0.5, "y_hi": None},
             {"x_lo": [0.0], "x_hi": [1.0], "y_lo": -0.5, "y_hi": 1.0}]
    cfg = _cfg(kind="pointprocess", t_values=[1e4], replicas=5, boxes=boxes)
    res = run_pointprocess(cfg)
    for row in res.rows:
        r = math.ceil(compute_scales(1.0, 1, 1e4).r_t) + 1
        x, y = rescale_points(PotentialField.lazy(1, 3 * r, 1.0, row["derived_seed"]), 1e4, -1.0)
        expect = [int(np.sum((x[:, 0] >= -1) & (x[:, 0] < 0) & (y >= -0.5))),
                  int(np.sum((x[:, 0] >= 0) & (x[:, 0] < 1) & (y >= -0.5) & (y < 1.0)))]
        assert row["counts"] == expect


def test_pointprocess_wide_box_mean_count():
    # a box spanning |x| <= 30 holds all but e^{-30} of the window mass
    box = {"x_lo": [-30.0], "x_hi": [30.0], "y_lo": 0.0, "y_hi": None}
    cfg = _cfg(kind="pointprocess", t_values=[1e6], replicas=60, boxes=[box])
    rows = collect_rows(cfg)
    mean = np.mean([r["counts"][0] for r in rows])
    assert box_mass(box, cfg) == pytest.approx(intensity_tail(0.0, LimitParams(1.0, 1)), rel=1e-12)
    assert abs(mean - 2.0) < 4 * math.sqrt(2.0 / 60) + 0.5


def test_ageing_rows():
    cfg = _cfg(kind="ageing", t_values=[1e4], replicas=6, w_grid=[0.1, 1.0], w_max=20.0)
    res = run_ageing(cfg)
    for row in res.rows:
        T, r = ageing_time_certified(1, 1.0, row["derived_seed"], 1e4, 20e4)
        assert row["censored"] == (not math.isfinite(T))
        if not row["censored"]:
            assert row["w"] == T / 1e4 > 0
    assert res.per_t[0]["grid"][0]["survival"] >= res.per_t[0]["grid"][1]["survival"]


def test_wrong_kind_rejected():
    with pytest.raises(ContractError):
        run_ageing(_cfg())


def test_replica_error_names_replica(monkeypatch):
    def boom(*a, **k):
        raise CertificationError("box too small")

    monkeypatch.setattr(ex, "locate_certified", boom)
    with pytest.raises(CertificationError, match=r"replica 2 \(seed \d+\): box too small"):
        replica_rows(_cfg(), 2)


def test_workers_env(monkeypatch):
    monkeypatch.setenv("PAM_WORKERS", "many")
    with pytest.raises(ContractError):
        ex.workers()
    monkeypatch.setenv("PAM_WORKERS", "0")
    assert ex.workers() == 1


def test_outputs_written_and_consistent(tmp_path):
    cfg = _cfg(replicas=6, limit_samples=2000)
    res = run_experiment(cfg, tmp_path)
    assert not (tmp_path / "rows.partial.jsonl").exists()
    lines = (tmp_path / "rows.jsonl").read_text().splitlines()
    rows = [json.loads(s) for s in lines]
    assert rows == json.loads(json.dumps(res.rows))
    assert [(r["t"], r["replica"]) for r in rows] == sorted((r["t"], r["replica"]) for r in rows)
    with open(tmp_path / "rows.csv") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == len(rows)
    assert [json.loads(r["z1"]) for r in table] == [r["z1"] for r in rows]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["passed"] == res.passed and summary["n_rows"] == len(rows)
    assert summary["config"] == cfg.to_dict()


def test_summary_from_rows_is_pure():
    cfg = _cfg(replicas=5, limit_samples=2000)
    rows = collect_rows(cfg)
    a, b = summarise(cfg, rows), summarise(cfg, rows)
    assert json.dumps(ex._clean(a.summary()), sort_keys=True) == json.dumps(ex._clean(b.summary()), sort_keys=True)


def test_shipped_configs_load():
    from pathlib import Path
    paths = sorted((Path(__file__).parent.parent / "configs").glob("*.json"))
    assert paths
    for p in paths:
        cfg = ExperimentConfig.load(p)
        assert cfg.dumps() == ExperimentConfig.loads(p.read_text()).dumps()

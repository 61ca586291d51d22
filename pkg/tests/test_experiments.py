import json
import math

import numpy as np
import pytest

from metastab.disorder import DisorderSpec
from metastab.exceptions import ConfigError, InsufficientReplicas
from metastab.experiments import (ExperimentConfig, ReplicaResult, capacity_concentration_report,
                                  harmonic_concentration_report, localization_report, mcdiarmid_harness,
                                  mgf_report, ratio_moment_report, ratio_tail_report, resolve_metaspec,
                                  resolve_threads, run_experiment, run_replicas, two_sided_tail,
                                  xi_tail_report)
from metastab.model import ModelParams

SMALL = dict(n_sites=8, replicas=6, set_mode="magnetization", set_values=(-1.0, 1.0), sizes=(6, 8),
             mgf_sizes=(6,), mgf_samples=4)


def deterministic(**kw):
    base = dict(n_sites=8, beta=2.0, replicas=3, disorder={"kind": "erdos_renyi", "p": 1.0}, sizes=(6, 8),
                mgf_sizes=(6,), mgf_samples=3)
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_validation():
    with pytest.raises(InsufficientReplicas):
        ExperimentConfig(replicas=1)
    with pytest.raises(ConfigError):
        ExperimentConfig(t_grid=(0.0, 1.0))
    with pytest.raises(ConfigError):
        ExperimentConfig(q_list=(0.5,))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"nonsense": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"schema_version": 99})
    cfg = ExperimentConfig(**SMALL)
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_auto_sets_need_constant_mean():
    cfg = ExperimentConfig(disorder={"kind": "inhomogeneous"})
    with pytest.raises(ConfigError):
        resolve_metaspec(cfg)
    with pytest.raises(ConfigError):
        resolve_metaspec(ExperimentConfig(n_sites=12))  # p=0.5 has a single free-energy minimum


def test_deterministic_disorder_is_annealed():
    res = run_replicas(deterministic())
    for r in res:
        assert not r.failed
        assert r.log_z_cap == r.ann_log_z_cap
        assert r.log_mean_hitting == r.ann_log_mean_hitting
        assert r.alpha_n == 0.0 and r.ratio == 1.0


def test_replicas_reproducible_and_thread_independent():
    cfg = ExperimentConfig(**SMALL)
    a = run_replicas(cfg, threads=1)
    b = run_replicas(cfg, threads=2)
    assert [r.replica_index for r in b] == list(range(6))
    assert a == b
    for r in a:
        assert r.log_mean_hitting == pytest.approx(r.log_z_harm - r.log_z_cap, abs=0)
        assert r.log_mean_hitting == pytest.approx(r.log_mean_hitting_direct, abs=1e-9)


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv("METASTAB_THREADS", "3")
    assert resolve_threads() == 3
    assert resolve_threads(2) == 2
    with pytest.raises(ConfigError):
        resolve_threads(0)


def fake(values, **kw):
    out = []
    for i, v in enumerate(values):
        r = ReplicaResult(i, 0, 0, log_z_cap=v, log_z_harm=v, log_mean_hitting=v, ann_log_mean_hitting=0.0,
                          alpha_n=0.0, xi_in=True, valley_ratio=1.0)
        for k, x in kw.items():
            setattr(r, k, x)
        out.append(r)
    return out


def test_tail_reports_on_constant_values():
    res = fake([0.3] * 10)
    t = (0.2, 1.5, 2.0)
    cap = capacity_concentration_report(res, 1.0, 1.0, t, min_replicas=2)
    assert all(r["empirical"] == 0.0 for r in cap.rows) and cap.status == "pass"
    bounds = [r["bound"] for r in cap.rows]
    assert bounds == sorted(bounds, reverse=True)
    assert cap.rows[0]["vacuous"] and not cap.rows[-1]["vacuous"]
    harm = harmonic_concentration_report(res, 1.0, 1.0, t, 8, 0.1, min_replicas=2)
    assert harm.passed
    with pytest.raises(InsufficientReplicas):
        capacity_concentration_report(res, 1.0, 1.0, t)


def test_harmonic_envelope_loosens_with_shift():
    res = fake(list(np.linspace(-1, 1, 20)))
    b0 = harmonic_concentration_report(res, 1.0, 1.0, (1.0,), 8, 0.1, 0.0, min_replicas=2).rows[0]["bound"]
    b1 = harmonic_concentration_report(res, 1.0, 1.0, (1.0,), 8, 0.1, 0.3, min_replicas=2).rows[0]["bound"]
    assert b1 > b0


def test_ratio_tail_vacuity_flags():
    rep = ratio_tail_report(fake([0.0] * 10), 1.5, 1.0, (1.0, 5.0), min_replicas=2)
    assert rep.rows[0]["bound"] == pytest.approx(1 - 4 * math.exp(-1 / 9))
    assert rep.rows[0]["vacuous"] and not rep.rows[1]["vacuous"]
    assert rep.rows[1]["empirical"] == 1.0 and rep.status == "pass"
    only_vacuous = ratio_tail_report(fake([0.0] * 10), 1.5, 1.0, (1.0,), min_replicas=2)
    assert only_vacuous.status == "vacuous" and only_vacuous.passed


def test_ratio_moments():
    rep = ratio_moment_report({8: fake([0.0] * 4), 10: fake([0.0] * 4)}, (1, 2))
    assert rep.c_fit == 0.0 and rep.passed
    for r in rep.rows:
        assert r["lower"] <= r["norm"] <= r["upper"]
    wide = ratio_moment_report({8: fake([-2.0, 2.0]), 12: fake([-1.0, 1.0])}, (1, 2))
    assert wide.c_fit > 0
    for r in wide.rows:
        assert r["lower"] - 1e-12 <= r["norm"] <= r["upper"] + 1e-12


def test_mgf_report():
    rep = mgf_report(lambda n: DisorderSpec("erdos_renyi", n, p=0.5), 1.5, 0.05, 1.0, (8, 12), 10)
    assert rep.passed and all(r["failures"] == 0 for r in rep.rows)
    assert rep.rows[1]["bound"] == pytest.approx(1.5**3 / 24)
    det = mgf_report(lambda n: DisorderSpec("erdos_renyi", n, p=1.0), 1.5, 0.05, 1.0, (8,), 5)
    assert det.rows[0]["empirical"] == 0.0


def test_mcdiarmid_harness():
    with pytest.raises(ConfigError):
        mcdiarmid_harness([1.0, 2.0], None, (0.5,))
    rep = mcdiarmid_harness([3.0] * 50, [1.0] * 4, (0.1, 0.5))
    assert all(r["empirical"] == 0.0 for r in rep.rows)
    rng = np.random.default_rng(0)
    x = rng.binomial(40, 0.5, size=5000).astype(float)
    rep = mcdiarmid_harness(x, np.ones(40), (2.0, 4.0, 6.0), center=20.0)
    assert rep.meta["v"] == 10.0 and rep.passed


def test_xi_tail_report():
    spec = DisorderSpec("erdos_renyi", 8, p=0.5)
    rep = xi_tail_report(spec, ModelParams(8, 1.0), [4.0, 4.5], 50)
    assert rep.passed
    assert rep.rows[0]["b_n"] == pytest.approx(8 - 8 * math.log(2))


def test_localization_trend_rule():
    good = {8: fake([0.0] * 3, valley_ratio=1.2), 12: fake([0.0] * 3, valley_ratio=1.01)}
    assert localization_report(good).status == "pass"
    flat = {8: fake([0.0] * 3, valley_ratio=1.01), 12: fake([0.0] * 3, valley_ratio=1.02)}
    assert localization_report(flat).status == "fail"
    outside = {8: fake([0.0] * 3, valley_ratio=1.2), 12: fake([0.0] * 3, valley_ratio=3.0, xi_in=False)}
    rows = localization_report(outside).rows
    assert rows[1]["excluded"] == 3 and math.isnan(rows[1]["empirical"])


def test_run_experiment_outputs(tmp_path):
    cfg = deterministic()
    out = run_experiment(cfg, tmp_path / "a")
    assert not out.failed
    names = sorted(out.files)
    assert names == sorted(["capacity_concentration.csv", "harmonic_concentration.csv", "ratio_tail.csv",
                            "ratio_moments.csv", "mgf.csv", "localization.csv", "replicas.csv"])
    manifest = json.loads(out.manifest_path.read_text())
    assert set(manifest["files"]) == set(names)
    assert manifest["config"] == cfg.to_dict()
    again = run_experiment(cfg, tmp_path / "b")
    second = json.loads(again.manifest_path.read_text())
    assert {k: v["sha256"] for k, v in manifest["files"].items()} == \
           {k: v["sha256"] for k, v in second["files"].items()}
    text = (tmp_path / "a" / "ratio_tail.csv").read_text()
    assert text.startswith("# report: ratio_tail")


def test_two_sided_tail():
    # deviations from the mean 1.5 are 1.5, 0.5, 0.5, 1.5; exceedance is strict
    rows = two_sided_tail([0.0, 1.0, 2.0, 3.0], (0.4, 0.5, 1.6))
    assert [r[1] for r in rows] == [1.0, 0.5, 0.0]

"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The disorder-statistics criteria share replica ensembles built once per
session from ``configs/standard_n12.yaml`` (N=12, Erdos-Renyi p=0.5,
beta=1.5, h=0.05, 2000 replicas).
"""
import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from conftest import ACCEPTANCE_LINES
from metastab.annealed import (BirthDeathChain, FreeEnergySpec, critical_field, local_minima, lumped_mean_hitting,
                               lumped_solve, metastable_sets, spinodal_field)
from metastab.disorder import DisorderSpec, deterministic_couplings
from metastab.dynamics import sample_hitting_times
from metastab.experiments import (ExperimentConfig, capacity_concentration_report, localization_report,
                                  mcdiarmid_harness, mgf_report, ratio_moment_report, ratio_tail_report,
                                  run_replicas, xi_tail_report)
from metastab.model import ModelParams
from metastab.potential import GlauberNetwork, MetaSpec, StateSet, metastability_certificate

STANDARD = Path(__file__).resolve().parents[1] / "configs" / "standard_n12.yaml"


def verdict(number: int, title: str, ok: bool, detail: str):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


@pytest.fixture(scope="module")
def standard():
    return ExperimentConfig.from_dict(yaml.safe_load(STANDARD.read_text()))


@pytest.fixture(scope="module")
def ensembles(standard):
    """Replica results at N=8, 10, 12 with the standard law and seeds."""
    return {n: run_replicas(standard.with_size(n)) for n in standard.sizes}


# exact identities


def test_criterion_01_mean_hitting_identity(er10, er10_sets):
    cm, params = er10
    a, b = er10_sets
    start = time.perf_counter()
    net = GlauberNetwork.from_couplings(cm, params)
    sol = net.solve(a, b)
    direct = net.mean_hitting_direct(b, sol.nu)
    elapsed = time.perf_counter() - start
    gap = abs(direct * sol.cap / sol.harm - 1)
    verdict(1, "mean hitting identity", gap <= 1e-9 and elapsed < 10,
            f"relative gap {gap:.2e}, {elapsed:.2f} s")


def test_criterion_02_variational_bracket(er10, er10_sets):
    cm, params = er10
    a, b = er10_sets
    net = GlauberNetwork.from_couplings(cm, params)
    sol = net.solve(a, b)
    rng = np.random.default_rng(2)
    am, bm = a.mask(), b.mask()
    worst_f = worst_flow = math.inf
    for i in range(100):
        # half arbitrary admissible functions, half perturbations of the optimum
        f = rng.uniform(0, 1, net.n_states) if i % 2 else np.clip(sol.h + 0.05 * rng.standard_normal(net.n_states), 0, 1)
        f[am], f[bm] = 1.0, 0.0
        worst_f = min(worst_f, net.dirichlet_energy(f, a, b) / sol.cap)
    for _ in range(20):
        flow = net.network_flow(net.cond * rng.uniform(0.05, 20.0, net.cond.size), a, b)
        flow.check_unit(am, bm)
        worst_flow = min(worst_flow, sol.cap * net.thomson_energy(flow, a, b))
    eq_f = abs(net.dirichlet_energy(sol.h, a, b) / sol.cap - 1)
    eq_flow = abs(1 / (sol.cap * net.thomson_energy(net.harmonic_flow(sol), a, b)) - 1)
    ok = worst_f >= 1 - 1e-12 and worst_flow >= 1 - 1e-12 and max(eq_f, eq_flow) <= 1e-8
    verdict(2, "variational bracket", ok,
            f"min D(f)/cap {worst_f:.4f}, min cap*E(flow) {worst_flow:.4f}, equality gaps {eq_f:.1e} {eq_flow:.1e}")


def test_criterion_03_exact_lumping():
    n, beta, h = 12, 1.5, 0.05
    start = time.perf_counter()
    m1, m2, _, _ = metastable_sets(FreeEnergySpec(beta, h), n)
    net = GlauberNetwork.from_couplings(deterministic_couplings(n), ModelParams(n, beta, h))
    sol = net.solve(m2, m1)
    chain = BirthDeathChain(n, beta, h)
    lumped = lumped_solve(chain, m2, m1)
    ident, _ = lumped_mean_hitting(chain, m2, m1)
    elapsed = time.perf_counter() - start
    gap_cap = abs(lumped.cap / sol.cap - 1)
    gap_t = abs(math.exp(ident) / sol.mean_hitting_time - 1)
    verdict(3, "exact lumping", max(gap_cap, gap_t) <= 1e-9 and elapsed < 30,
            f"capacity gap {gap_cap:.1e}, hitting gap {gap_t:.1e}, {elapsed:.2f} s")


# disorder statistics


@pytest.mark.slow
def test_criterion_04_capacity_concentration(standard, ensembles):
    rep = capacity_concentration_report(ensembles[12], standard.beta, standard.k_j, standard.t_grid)
    informative = len(rep.informative_rows)
    worst = max(r["empirical"] - r["bound"] - 3 * r["stderr"] for r in rep.rows)
    verdict(4, "capacity concentration", not rep.failed_rows,
            f"R={rep.n_samples}, std {rep.meta['std']:.3f}, worst excess {worst:.3f}, {informative} non-vacuous t")


def test_criterion_05_mgf_remainder():
    rep = mgf_report(lambda n: DisorderSpec("erdos_renyi", n, p=0.5), 1.5, 0.05, 1.0, (8, 12, 16), 100)
    fails = sum(r["failures"] for r in rep.rows)
    detail = ", ".join(f"N={r['N']} worst {r['empirical']:.2e} <= {r['bound']:.2e}" for r in rep.rows)
    verdict(5, "MGF remainder", fails == 0, f"{fails} failures; {detail}")


@pytest.mark.slow
def test_criterion_06_xi_tail():
    n = 12
    spec = DisorderSpec("erdos_renyi", n, p=0.5)
    # b_N = a^2/2 - N log 2 lies in (0, 5) for a in (4.08, 5.16)
    a_values = (4.2, 4.65, 5.1)
    rep = xi_tail_report(spec, ModelParams(n, 1.5, 0.05), a_values, 5000, master_seed=606)
    assert all(0 < r["b_n"] < 5 for r in rep.rows)
    detail = ", ".join(f"b={r['b_n']:.2f}: {r['empirical']:.4f} <= {r['bound']:.4f}" for r in rep.rows)
    verdict(6, "Xi tail", not rep.failed_rows, detail)


@pytest.mark.slow
def test_criterion_07_ratio_sandwich(standard, ensembles):
    rep = ratio_tail_report(ensembles[12], standard.beta, standard.k_j, standard.ratio_t_grid, standard.slack)
    counted = rep.informative_rows
    detail = ", ".join(f"t={r['t']:g}: {r['empirical']:.3f} >= {r['bound']:.3f}" for r in counted)
    flagged = [r["t"] for r in rep.rows if r["vacuous"]]
    verdict(7, "ratio sandwich", bool(counted) and not rep.failed_rows,
            f"{detail}; vacuous t {flagged}")


@pytest.mark.slow
def test_criterion_08_ratio_moments(standard, ensembles):
    rep = ratio_moment_report(ensembles, standard.q_list, standard.moment_c_max)
    verdict(8, "ratio moments", rep.passed, f"fitted c = {rep.c_fit:.4f} over {len(rep.rows)} (N, q) cells")


@pytest.mark.slow
def test_criterion_09_localization(standard, ensembles):
    rep = localization_report({8: ensembles[8], 12: ensembles[12]}, standard.localization_threshold)
    dev8, dev12 = rep.rows[0]["empirical"], rep.rows[-1]["empirical"]
    ok = dev12 <= standard.localization_threshold and dev12 < dev8
    verdict(9, "harmonic-sum localization", ok,
            f"max deviation N=8 {dev8:.4f}, N=12 {dev12:.4f}, excluded {rep.rows[-1]['excluded']}")


# annealed model


def test_criterion_10_critical_field():
    gap = max(abs(critical_field(b) - spinodal_field(b)) for b in (1.2, 1.5, 2.0, 3.0))
    mins = [x for x, k in local_minima(FreeEnergySpec(2.0)) if k == "min"]
    ok = gap <= 1e-8 and len(mins) == 2 and all(abs(abs(x) - 0.9575040) <= 1e-6 for x in mins) \
        and mins[0] < 0 < mins[1]
    verdict(10, "critical field", ok, f"closed form vs spinodal {gap:.1e}, minima {mins[0]:.7f} {mins[1]:.7f}")


# dynamics


@pytest.mark.slow
def test_criterion_11_simulation(er10):
    cm, params = er10
    a, b = StateSet.from_magnetization(10, -0.6), StateSet.from_magnetization(10, 0.6)
    net = GlauberNetwork.from_couplings(cm, params)
    sol = net.solve(a, b)
    rng = np.random.default_rng(11)
    starts = rng.choice(net.n_states, size=10_000, p=sol.nu)
    times = []
    for s, count in zip(*np.unique(starts, return_counts=True)):
        times.append(sample_hitting_times(int(s), b, cm, params, int(count), seed=1000 + int(s)))
    times = np.concatenate(times)
    se = times.std(ddof=1) / math.sqrt(times.size)
    z = (times.mean() - sol.mean_hitting_time) / se
    e = net.landscape.energies
    lhs = math.exp(net.log_z) * net.gibbs[net.src] * np.exp(-params.beta * np.maximum(e[net.dst] - e[net.src], 0))
    rhs = np.exp(-params.beta * np.maximum(e[net.src], e[net.dst]))
    db = float(np.max(np.abs(lhs / rhs - 1)))
    ok = abs(z) <= 3 and not np.isnan(times).any() and db <= 1e-12
    verdict(11, "simulation unbiasedness", ok,
            f"sampled {times.mean():.4f} vs exact {sol.mean_hitting_time:.4f} (z={z:+.2f}), balance gap {db:.1e}")


def test_criterion_12_certificate():
    beta, h = 1.5, 0.05
    upper = {}
    for n in (8, 10, 12):
        m1, m2, _, _ = metastable_sets(FreeEnergySpec(beta, h), n)
        cert = metastability_certificate(deterministic_couplings(n), ModelParams(n, beta, h), MetaSpec([m1, m2]))
        upper[n] = cert.ratio_upper
    ok = upper[8] > upper[10] > upper[12] and upper[12] < 1
    verdict(12, "metastability certificate", ok,
            ", ".join(f"N={n} ratio_upper {u:.4f}" for n, u in upper.items()))


@pytest.mark.slow
def test_criterion_13_mcdiarmid():
    rng = np.random.default_rng(13)
    m = 40
    oracle = mcdiarmid_harness(rng.binomial(m, 0.5, size=20_000), np.ones(m), (2.0, 4.0, 6.0, 8.0), center=m / 2)
    cfg = ExperimentConfig(n_sites=10, beta=1.5, h=0.05, replicas=2000, master_seed=1313,
                           set_mode="magnetization", set_values=(-1.0, 1.0))
    res = run_replicas(cfg)
    vals = [r.log_z_cap for r in res if not r.failed]
    n_edges = cfg.n_sites * (cfg.n_sites - 1) // 2
    c = np.full(n_edges, 2 * cfg.beta * cfg.k_j / cfg.n_sites)
    functional = mcdiarmid_harness(vals, c, (0.5, 1.0, 1.5, 2.0, 2.5))
    ok = not oracle.failed_rows and not functional.failed_rows
    detail = "; ".join(
        f"{name} v={rep.meta['v']:.3g}: " + ", ".join(f"{r['empirical']:.4f}<={r['bound']:.4f}" for r in rep.rows)
        for name, rep in (("binomial", oracle), ("log(Z cap)", functional)))
    verdict(13, "McDiarmid harness", ok, detail)


def test_standard_config_matches_criteria(standard):
    assert dataclasses.astuple(standard)[:4] == (12, 1.5, 0.05, 1.0)
    assert standard.replicas == 2000 and standard.disorder == {"kind": "erdos_renyi", "p": 0.5}

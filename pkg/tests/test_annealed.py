import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq
from scipy.special import comb

from metastab.annealed import (BirthDeathChain, FreeEnergySpec, critical_field, free_energy,
                               free_energy_derivative, local_minima, lumped_capacity, lumped_mean_hitting,
                               lumped_solve, metastable_sets, nearest_level, spinodal_field,
                               write_chain_table)
from metastab.disorder import deterministic_couplings
from metastab.exceptions import ConfigError
from metastab.model import ModelParams
from metastab.potential import GlauberNetwork, StateSet

# frozen oracles: m = tanh(2m) by fixed-point iteration, and the closed form
# p x_s - atanh(x_s)/beta evaluated independently at 30 digits
M_STAR_BETA2 = 0.9575040240772688
H_C = {1.2: 0.04699215442612754, 1.5: 0.13836430354802019, 2.0: 0.26641998767677601, 3.0: 0.43442463600086308}


def test_fixed_point_oracle_frozen():
    m = 0.5
    for _ in range(500):
        m = math.tanh(2 * m)
    assert m == pytest.approx(M_STAR_BETA2, abs=1e-15)


def test_free_energy_values():
    spec = FreeEnergySpec(1.0)
    assert free_energy(0.0, spec) == pytest.approx(0.0, abs=1e-15)
    assert free_energy(1.0, spec) == pytest.approx(-0.5 + math.log(2), abs=1e-15)
    assert free_energy(-1.0, spec) == pytest.approx(-0.5 + math.log(2), abs=1e-15)
    with pytest.raises(ConfigError):
        free_energy(1.5, spec)


@given(x=st.floats(-1, 1), beta=st.floats(0.1, 5), pbar=st.floats(0, 1))
@settings(max_examples=100, deadline=None)
def test_free_energy_even_at_zero_field(x, beta, pbar):
    spec = FreeEnergySpec(beta, 0.0, pbar)
    assert free_energy(x, spec) == pytest.approx(free_energy(-x, spec), abs=1e-13)


def test_derivative_matches_finite_difference():
    spec = FreeEnergySpec(1.7, 0.1, 0.8)
    x = np.linspace(-0.9, 0.9, 13)
    eps = 1e-6
    fd = (free_energy(x + eps, spec) - free_energy(x - eps, spec)) / (2 * eps)
    np.testing.assert_allclose(free_energy_derivative(x, spec), fd, atol=1e-8)


def test_minima():
    mins = [x for x, k in local_minima(FreeEnergySpec(2.0)) if k == "min"]
    assert mins == pytest.approx([-M_STAR_BETA2, M_STAR_BETA2], abs=1e-12)
    sub = local_minima(FreeEnergySpec(0.5))
    assert len(sub) == 1 and sub[0][1] == "min" and abs(sub[0][0]) < 1e-14
    tilted = FreeEnergySpec(1.5, 0.05)
    xs = [x for x, k in local_minima(tilted) if k == "min"]
    assert xs[0] < 0 < xs[1] and abs(xs[1]) > abs(xs[0])
    assert free_energy(xs[1], tilted) < free_energy(xs[0], tilted)


@pytest.mark.parametrize("beta", sorted(H_C))
def test_critical_field(beta):
    assert critical_field(beta) == pytest.approx(H_C[beta], abs=1e-13)
    assert abs(critical_field(beta) - spinodal_field(beta)) <= 1e-8


def test_critical_field_limits_and_meaning():
    assert critical_field(1.0 + 1e-9) < 1e-12
    with pytest.raises(ConfigError):
        critical_field(0.5)
    hc = critical_field(2.0)
    below = [k for _, k in local_minima(FreeEnergySpec(2.0, hc * 0.99))].count("min")
    above = [k for _, k in local_minima(FreeEnergySpec(2.0, hc * 1.01))].count("min")
    assert (below, above) == (2, 1)


def test_critical_field_independent_root():
    # the negative zero of F'' found by brentq, then the field making it stationary
    beta = 1.5
    xs = -brentq(lambda x: -1 + 1 / (beta * (1 - x * x)), 0.0, 0.999)
    h = math.atanh(xs) / beta - xs
    assert critical_field(beta) == pytest.approx(h, abs=1e-12)


def test_metastable_sets():
    m1, m2, x1, x2 = metastable_sets(FreeEnergySpec(2.0), 12)
    assert x1 == -x2
    m1, m2, x1, x2 = metastable_sets(FreeEnergySpec(1.5, 0.05), 12)
    assert m1.isdisjoint(m2) and m1.cardinality > 0 and m2.cardinality > 0
    for s, x in ((m1, x1), (m2, x2)):
        assert s.cardinality == comb(12, round(12 * (1 + x) / 2), exact=True)
    with pytest.raises(ConfigError):
        metastable_sets(FreeEnergySpec(0.5), 12)


def test_nearest_level_ties_go_down():
    assert nearest_level(0.0, 5) == 2
    assert nearest_level(0.95, 10) == 10  # 9.75 up spins
    assert nearest_level(-1.0, 7) == 0


@given(n=st.integers(2, 400), beta=st.floats(0.2, 4), h=st.floats(-0.5, 0.5), pbar=st.floats(0.1, 1))
@settings(max_examples=60, deadline=None)
def test_chain_detailed_balance(n, beta, h, pbar):
    chain = BirthDeathChain(n, beta, h, pbar)
    assert chain.detailed_balance_error() <= 1e-12
    assert math.fsum(chain.mu) == pytest.approx(1.0, abs=1e-12)


def test_chain_scales():
    chain = BirthDeathChain(10_000, 1.5, 0.05)
    assert chain.detailed_balance_error() <= 1e-9
    m1, m2, _, _ = metastable_sets(FreeEnergySpec(1.5, 0.05), 10_000)
    ident, direct = lumped_mean_hitting(chain, m2, m1)
    assert math.isfinite(ident) and ident == pytest.approx(direct, rel=1e-12)


@pytest.mark.parametrize("n", [8, 10, 12])
def test_lumping_matches_full_chain(n):
    beta, h = 1.5, 0.05
    m1, m2, _, _ = metastable_sets(FreeEnergySpec(beta, h), n)
    net = GlauberNetwork.from_couplings(deterministic_couplings(n), ModelParams(n, beta, h))
    sol = net.solve(m2, m1)
    chain = BirthDeathChain(n, beta, h)
    lsol = lumped_solve(chain, m2, m1)
    assert lumped_capacity(chain, m2, m1) == pytest.approx(sol.cap, rel=1e-9)
    assert lsol.harm == pytest.approx(sol.harm, rel=1e-9)
    ident, direct = lumped_mean_hitting(chain, m2, m1)
    assert math.exp(ident) == pytest.approx(sol.mean_hitting_time, rel=1e-9)
    assert math.exp(direct) == pytest.approx(sol.mean_hitting_time, rel=1e-9)


def test_two_level_capacity():
    chain = BirthDeathChain(1, 1.0, 0.3)
    assert lumped_capacity(chain, [0], [1]) == pytest.approx(chain.mu[0] * chain.up[0], rel=1e-14)


def test_hitting_grows_with_beta():
    times = []
    for beta in (1.2, 1.5, 2.0):
        chain = BirthDeathChain(40, beta, 0.02)
        m1, m2, _, _ = metastable_sets(FreeEnergySpec(beta, 0.02), 40)
        times.append(lumped_mean_hitting(chain, m2, m1)[0])
    assert times[0] < times[1] < times[2]


def test_two_sided_target_uses_banded_route():
    chain = BirthDeathChain(30, 1.5, 0.0)
    a, b = [15], [0, 30]
    ident, direct = lumped_mean_hitting(chain, a, b)
    assert ident == pytest.approx(direct, rel=1e-10)


def test_lumped_rejects_overlap():
    chain = BirthDeathChain(6, 1.0)
    with pytest.raises(ConfigError):
        lumped_solve(chain, [2], StateSet(6, levels=[2, 3]))


def test_chain_table(tmp_path):
    chain = BirthDeathChain(6, 1.5, 0.05)
    path = tmp_path / "chain.csv"
    write_chain_table(path, chain, FreeEnergySpec(1.5, 0.05))
    lines = path.read_text().splitlines()
    assert lines[0] == "m,F,mu_hat,log_mu_hat,b,d" and len(lines) == 8

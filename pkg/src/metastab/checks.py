"""Fast self-checks of the exact identities, run by ``metastab check``."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .annealed import BirthDeathChain, FreeEnergySpec, critical_field, local_minima, lumped_mean_hitting, \
    lumped_solve, metastable_sets, spinodal_field
from .disorder import DisorderSpec, RandomSeed, deterministic_couplings, sample_couplings
from .model import ModelParams, all_energies, flip_delta, hamiltonian
from .potential import GlauberNetwork, StateSet

__all__ = ["CheckResult", "run_checks"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _instance(n=10, beta=1.4, h=0.1, p=0.5, seed=2024):
    cm = sample_couplings(DisorderSpec("erdos_renyi", n, p=p), RandomSeed(seed, 0))
    return cm, ModelParams(n, beta, h)


def check_flip_consistency() -> CheckResult:
    cm, params = _instance(8)
    e = all_energies(cm, params)
    worst = 0.0
    for s in range(1 << 8):
        for k in range(8):
            worst = max(worst, abs(e[s ^ (1 << k)] - e[s] - flip_delta(cm, params, s, k)))
    worst = max(worst, abs(hamiltonian(cm, params, 5) - e[5]))
    return CheckResult("flip consistency", worst <= 1e-12, f"max error {worst:.2e}")


def check_mean_hitting_identity() -> CheckResult:
    cm, params = _instance()
    net = GlauberNetwork.from_couplings(cm, params)
    a, b = StateSet.from_magnetization(10, -0.8), StateSet.from_magnetization(10, 0.8)
    sol = net.solve(a, b)
    direct = net.mean_hitting_direct(b, sol.nu)
    gap = abs(sol.mean_hitting_time / direct - 1)
    return CheckResult("mean hitting identity", gap <= 1e-9, f"relative gap {gap:.2e}")


def check_detailed_balance() -> CheckResult:
    cm, params = _instance()
    net = GlauberNetwork.from_couplings(cm, params)
    e = net.landscape.energies
    z = math.exp(net.log_z)
    mu = net.gibbs
    rate = np.exp(-params.beta * np.maximum(e[net.dst] - e[net.src], 0.0))
    lhs = z * mu[net.src] * rate
    rhs = np.exp(-params.beta * np.maximum(e[net.src], e[net.dst]))
    gap = float(np.max(np.abs(lhs / rhs - 1)))
    return CheckResult("detailed balance", gap <= 1e-12, f"max relative gap {gap:.2e}")


def check_variational_bracket() -> CheckResult:
    cm, params = _instance()
    net = GlauberNetwork.from_couplings(cm, params)
    a, b = StateSet.from_magnetization(10, -1.0), StateSet.from_magnetization(10, 1.0)
    sol = net.solve(a, b)
    e = net.dirichlet_energy(sol.h, a, b)
    d = net.thomson_energy(net.harmonic_flow(sol), a, b)
    gap = max(abs(e / sol.cap - 1), abs(1 / (d * sol.cap) - 1))
    return CheckResult("Dirichlet/Thomson equality", gap <= 1e-8, f"relative gap {gap:.2e}")


def check_lumping() -> CheckResult:
    n, beta, h = 12, 1.5, 0.05
    m1, m2, _, _ = metastable_sets(FreeEnergySpec(beta, h), n)
    net = GlauberNetwork.from_couplings(deterministic_couplings(n), ModelParams(n, beta, h))
    sol = net.solve(m2, m1)
    chain = BirthDeathChain(n, beta, h)
    ls = lumped_solve(chain, m2, m1)
    ident, direct = lumped_mean_hitting(chain, m2, m1)
    gap = max(abs(sol.cap / ls.cap - 1), abs(sol.log_mean_hitting_time - ident), abs(ident - direct))
    return CheckResult("exact lumping", gap <= 1e-9, f"max relative gap {gap:.2e}")


def check_critical_field() -> CheckResult:
    gap = max(abs(critical_field(b) - spinodal_field(b)) for b in (1.2, 1.5, 2.0, 3.0))
    mins = [x for x, k in local_minima(FreeEnergySpec(2.0)) if k == "min"]
    ok = gap <= 1e-8 and len(mins) == 2 and abs(mins[1] - 0.9575040) <= 1e-6
    return CheckResult("critical field and minima", ok, f"closed form vs spinodal {gap:.2e}, minima {mins}")


CHECKS = (
    check_flip_consistency,
    check_detailed_balance,
    check_mean_hitting_identity,
    check_variational_bracket,
    check_lumping,
    check_critical_field,
)


def run_checks() -> list:
    return [c() for c in CHECKS]

"""Shared instances and an independent dense-matrix oracle for small chains."""
from __future__ import annotations

import numpy as np
import pytest

from metastab.disorder import DisorderSpec, RandomSeed, sample_couplings
from metastab.model import ModelParams, spins_from_index
from metastab.potential import StateSet

# seeded N=10 Erdos-Renyi instance shared by the exact-identity checks
ER10_SEED = RandomSeed(7, 0)
ER10_BETA, ER10_H = 1.4, 0.1


@pytest.fixture(scope="session")
def er10():
    cm = sample_couplings(DisorderSpec("erdos_renyi", 10, p=0.5), ER10_SEED)
    return cm, ModelParams(10, ER10_BETA, ER10_H)


@pytest.fixture(scope="session")
def er10_sets():
    return StateSet.from_magnetization(10, -1.0, "minus"), StateSet.from_magnetization(10, 1.0, "plus")


def brute_energies(cm, params) -> np.ndarray:
    """Hamiltonian by explicit pair sums, one configuration at a time."""
    n = params.n_sites
    sym = cm.symmetric()
    out = np.empty(1 << n)
    for i in range(1 << n):
        s = spins_from_index(i, n).astype(float)
        pair = 0.0
        for a in range(n):
            for b in range(a + 1, n):
                pair += sym[a, b] * s[a] * s[b]
        out[i] = -pair / n - params.h * s.sum()
    return out


class DenseChain:
    """Metropolis generator as a dense matrix with direct linear solves."""

    def __init__(self, energies: np.ndarray, beta: float, n_sites: int):
        self.n = n_sites
        size = 1 << n_sites
        self.energies = energies
        q = np.zeros((size, size))
        for s in range(size):
            for k in range(n_sites):
                t = s ^ (1 << k)
                q[s, t] = np.exp(-beta * max(energies[t] - energies[s], 0.0))
        q[np.diag_indices(size)] = -q.sum(axis=1)
        self.q = q
        w = np.exp(-beta * (energies - energies.min()))
        self.mu = w / w.sum()

    def potential(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        h = a.astype(float)
        inner = ~(a | b)
        qi = self.q[np.ix_(inner, inner)]
        rhs = -self.q[np.ix_(inner, a)].sum(axis=1)
        h[inner] = np.linalg.solve(qi, rhs)
        return h

    def capacity(self, a, b) -> float:
        h = self.potential(a, b)
        return float(np.sum(self.mu[a] * -(self.q @ h)[a]))

    def hitting_times(self, b: np.ndarray) -> np.ndarray:
        u = np.zeros(self.q.shape[0])
        inner = ~b
        u[inner] = np.linalg.solve(-self.q[np.ix_(inner, inner)], np.ones(inner.sum()))
        return u

    def last_exit(self, a, b) -> np.ndarray:
        h = self.potential(a, b)
        flux = np.where(a, self.mu * -(self.q @ h), 0.0)
        return flux / flux.sum()


@pytest.fixture(scope="session")
def er10_dense(er10):
    cm, params = er10
    return DenseChain(brute_energies(cm, params), params.beta, params.n_sites)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

"""
Hamiltonians, Gibbs measures and the quenched/annealed comparison.

Spin configurations are indexed by integers in ``[0, 2^N)``: bit ``k`` of
the index is set iff ``sigma_k = +1``.  Sites are 0-based.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .disorder import CouplingMatrix, annealed_couplings
from .exceptions import CapabilityError, ConfigError

__all__ = [
    "ModelParams",
    "SpinConfig",
    "XiSpec",
    "spins_from_index",
    "index_from_spins",
    "spin_table",
    "magnetizations",
    "hamiltonian",
    "flip_delta",
    "all_energies",
    "EnergyLandscape",
    "partition_function",
    "log_partition_function",
    "gibbs",
    "delta_energy",
    "all_delta_energies",
    "xi_check",
    "log_conditional_mgf_exact",
    "conditional_mgf_exact",
    "DEFAULT_ENUM_LIMIT",
]

DEFAULT_ENUM_LIMIT = 20
_CHUNK = 1 << 15


@dataclass(frozen=True)
class ModelParams:
    n_sites: int
    beta: float
    h: float = 0.0
    k_j: float = 1.0
    enum_limit: int = DEFAULT_ENUM_LIMIT

    def __post_init__(self):
        if int(self.n_sites) != self.n_sites or self.n_sites < 1:
            raise ConfigError(f"n_sites must be a positive integer, got {self.n_sites}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if not math.isfinite(self.h):
            raise ConfigError("h must be finite")

    def require_enumerable(self):
        if self.n_sites > self.enum_limit:
            raise CapabilityError(
                f"N={self.n_sites} exceeds the exact-enumeration limit {self.enum_limit}; "
                "use the lumped annealed chain (metastab.annealed / `metastab lumped`) instead"
            )


@dataclass(frozen=True)
class SpinConfig:
    """A point of {-1, +1}^N stored as its integer index."""

    index: int
    n_sites: int

    @classmethod
    def from_spins(cls, spins) -> "SpinConfig":
        spins = np.asarray(spins)
        return cls(index_from_spins(spins), spins.size)

    @property
    def spins(self) -> np.ndarray:
        return spins_from_index(self.index, self.n_sites)

    @property
    def magnetization(self) -> float:
        return (2 * bin(self.index).count("1") - self.n_sites) / self.n_sites

    def flipped(self, k: int) -> "SpinConfig":
        if not 0 <= k < self.n_sites:
            raise ConfigError(f"site {k} out of range for N={self.n_sites}")
        return SpinConfig(self.index ^ (1 << k), self.n_sites)


@dataclass(frozen=True)
class XiSpec:
    """Energy tolerance ``a_N`` of the event Xi(a_N)."""

    a_n: float
    k_j: float
    n_sites: int

    @property
    def b_n(self) -> float:
        return self.a_n**2 / (2.0 * self.k_j) - self.n_sites * math.log(2.0)

    @property
    def tail_bound(self) -> float:
        """``min(1, exp(-b_N))``, the bound on P[Xi(a_N)^c]."""
        return min(1.0, math.exp(-self.b_n)) if self.b_n > -700 else 1.0


def spins_from_index(index: int, n_sites: int) -> np.ndarray:
    return (((int(index) >> np.arange(n_sites)) & 1) * 2 - 1).astype(np.int8)


def index_from_spins(spins) -> int:
    spins = np.asarray(spins)
    if not np.all(np.abs(spins) == 1):
        raise ConfigError("spins must be +-1")
    return int(np.sum((spins > 0).astype(np.int64) << np.arange(spins.size, dtype=np.int64)))


def spin_table(n_sites: int, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Spins of configurations ``start..stop-1`` as a (count, N) int8 array."""
    stop = (1 << n_sites) if stop is None else stop
    idx = np.arange(start, stop, dtype=np.int64)
    return (((idx[:, None] >> np.arange(n_sites)) & 1) * 2 - 1).astype(np.int8)


def magnetizations(n_sites: int) -> np.ndarray:
    """Empirical magnetization of every configuration, exact on the grid."""
    idx = np.arange(1 << n_sites, dtype=np.int64)
    ups = np.zeros(idx.size, dtype=np.int64)
    for k in range(n_sites):
        ups += (idx >> k) & 1
    return (2 * ups - n_sites) / n_sites


def _as_spins(sigma, n_sites: int) -> np.ndarray:
    if isinstance(sigma, SpinConfig):
        if sigma.n_sites != n_sites:
            raise ConfigError(f"configuration has N={sigma.n_sites}, model has N={n_sites}")
        return sigma.spins.astype(float)
    if isinstance(sigma, (int, np.integer)):
        return spins_from_index(int(sigma), n_sites).astype(float)
    s = np.asarray(sigma, dtype=float)
    if s.shape != (n_sites,):
        raise ConfigError(f"expected {n_sites} spins, got shape {s.shape}")
    return s


def _check_dims(cm: CouplingMatrix, params: ModelParams):
    if cm.n_sites != params.n_sites:
        raise ConfigError(f"couplings have N={cm.n_sites}, parameters have N={params.n_sites}")


def hamiltonian(cm: CouplingMatrix, params: ModelParams, sigma) -> float:
    """``-(1/N) sum_{i<j} J_ij s_i s_j - h sum_i s_i``."""
    _check_dims(cm, params)
    s = _as_spins(sigma, params.n_sites)
    pair = 0.5 * s @ cm.symmetric() @ s
    return float(-pair / params.n_sites - params.h * s.sum())


def flip_delta(cm: CouplingMatrix, params: ModelParams, sigma, k: int) -> float:
    """Energy change ``H(sigma^k) - H(sigma)`` of flipping site ``k``, in O(N)."""
    _check_dims(cm, params)
    if not 0 <= k < params.n_sites:
        raise ConfigError(f"site {k} out of range for N={params.n_sites}")
    s = _as_spins(sigma, params.n_sites)
    field = cm.symmetric()[k] @ s / params.n_sites + params.h
    return float(2.0 * s[k] * field)


def _quadratic_energies(sym: np.ndarray, h: float, n_sites: int) -> np.ndarray:
    n_states = 1 << n_sites
    out = np.empty(n_states)
    for start in range(0, n_states, _CHUNK):
        stop = min(start + _CHUNK, n_states)
        s = spin_table(n_sites, start, stop).astype(float)
        out[start:stop] = -0.5 * np.einsum("si,si->s", s @ sym, s) / n_sites - h * s.sum(axis=1)
    return out


def all_energies(cm: CouplingMatrix, params: ModelParams) -> np.ndarray:
    """Hamiltonian of every configuration, indexed by configuration index."""
    _check_dims(cm, params)
    params.require_enumerable()
    return _quadratic_energies(cm.symmetric(), params.h, params.n_sites)


def all_delta_energies(cm: CouplingMatrix, params: ModelParams) -> np.ndarray:
    """``Delta_N(sigma) = H_N(sigma) - H~_N(sigma)`` for every configuration."""
    _check_dims(cm, params)
    params.require_enumerable()
    diff = cm.symmetric() - cm.mean_symmetric()
    return _quadratic_energies(diff, 0.0, params.n_sites)


class EnergyLandscape:
    """Energies of all configurations with a numerically safe Gibbs measure.

    Weights are stored relative to the ground state: ``weights = exp(-beta (H - H_min))``
    and ``log Z = -beta H_min + log(sum(weights))``.
    """

    def __init__(self, energies: np.ndarray, beta: float, n_sites: int):
        self.energies = np.asarray(energies, dtype=float)
        self.beta = float(beta)
        self.n_sites = n_sites
        self.e_min = float(self.energies.min())
        self.weights = np.exp(-self.beta * (self.energies - self.e_min))
        self.z_scaled = math.fsum(self.weights)
        self.log_z = -self.beta * self.e_min + math.log(self.z_scaled)

    @classmethod
    def from_couplings(cls, cm: CouplingMatrix, params: ModelParams) -> "EnergyLandscape":
        return cls(all_energies(cm, params), params.beta, params.n_sites)

    @property
    def gibbs(self) -> np.ndarray:
        return self.weights / self.z_scaled

    def measure(self, mask: np.ndarray) -> float:
        return math.fsum(self.weights[mask]) / self.z_scaled

    def log_measure_times_z(self, mask: np.ndarray) -> float:
        """``log(Z * mu[X])``."""
        return -self.beta * self.e_min + math.log(math.fsum(self.weights[mask]))


def log_partition_function(cm: CouplingMatrix, params: ModelParams) -> float:
    return EnergyLandscape.from_couplings(cm, params).log_z


def partition_function(cm: CouplingMatrix, params: ModelParams) -> float:
    return math.exp(log_partition_function(cm, params))


def gibbs(cm: CouplingMatrix, params: ModelParams, sigma=None):
    """Gibbs probability of ``sigma``, or the whole vector when ``sigma`` is None."""
    land = EnergyLandscape.from_couplings(cm, params)
    if sigma is None:
        return land.gibbs
    s = _as_spins(sigma, params.n_sites)
    return float(land.gibbs[index_from_spins(s)])


def delta_energy(cm: CouplingMatrix, params: ModelParams, sigma) -> float:
    _check_dims(cm, params)
    s = _as_spins(sigma, params.n_sites)
    diff = cm.symmetric() - cm.mean_symmetric()
    return float(-0.5 * s @ diff @ s / params.n_sites)


def xi_check(cm: CouplingMatrix, params: ModelParams, xs: XiSpec | float):
    """Exact test of the event ``max_sigma |H - H~| < a_N``.

    Returns ``(in_event, max_dev)``; the inequality is strict.
    """
    a_n = xs.a_n if isinstance(xs, XiSpec) else float(xs)
    if a_n < 0:
        raise ConfigError("a_N must be non-negative")
    max_dev = float(np.max(np.abs(all_delta_energies(cm, params))))
    return max_dev < a_n, max_dev


def _edge_atoms(cm: CouplingMatrix):
    """Recover the two-point law ``A w.p. P, else 0`` of each edge from its moments."""
    m, v = cm.mean, cm.var
    with np.errstate(divide="ignore", invalid="ignore"):
        atom = np.where(m != 0, m + v / np.where(m != 0, m, 1.0), 0.0)
        prob = np.where(atom != 0, m / np.where(atom != 0, atom, 1.0), 0.0)
    if np.any(prob < -1e-12) or np.any(prob > 1 + 1e-12) or np.any((m == 0) & (v != 0)):
        raise ConfigError("edge laws are not two-point laws with an atom at 0")
    return atom, np.clip(prob, 0.0, 1.0)


def log_conditional_mgf_exact(cm: CouplingMatrix, params: ModelParams, sigma, sign: int = 1) -> float:
    """``log E_G[exp(sign * beta * Delta_N(sigma))]`` as an exact product over edges."""
    _check_dims(cm, params)
    if sign not in (1, -1):
        raise ConfigError("sign must be +1 or -1")
    s = _as_spins(sigma, params.n_sites)
    iu, ju = np.triu_indices(params.n_sites, 1)
    atom, prob = _edge_atoms(cm)
    t = -sign * params.beta * s[iu] * s[ju] / params.n_sites
    mean = atom * prob
    with np.errstate(divide="ignore"):
        lo = np.log1p(-prob) - t * mean
        hi = np.log(prob) + t * (atom - mean)
    return float(math.fsum(np.logaddexp(lo, hi)))


def conditional_mgf_exact(cm: CouplingMatrix, params: ModelParams, sigma, sign: int = 1) -> float:
    return math.exp(log_conditional_mgf_exact(cm, params, sigma, sign))


def annealed_landscape(cm: CouplingMatrix, params: ModelParams) -> EnergyLandscape:
    return EnergyLandscape.from_couplings(annealed_couplings(cm), params)

"""
Annealed Curie-Weiss reference model.

With constant mean coupling ``pbar`` the annealed Hamiltonian depends on a
configuration only through its magnetization ``m``:

    H(m) = -pbar N m^2 / 2 + pbar / 2 - h N m,

so the Metropolis chain lumps exactly onto the ``N + 1`` magnetization levels.
Levels are indexed by the number of up spins ``k`` (``m = 2k/N - 1``), and all
level weights are kept in log space so the chain scales to ``N = 10^4``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_banded
from scipy.optimize import brentq, minimize_scalar
from scipy.special import gammaln, logsumexp, xlogy

from .exceptions import ConfigError
from .potential import StateSet

__all__ = [
    "FreeEnergySpec",
    "free_energy",
    "free_energy_derivative",
    "local_minima",
    "critical_field",
    "spinodal_field",
    "metastable_sets",
    "nearest_level",
    "BirthDeathChain",
    "LumpedSolution",
    "lumped_solve",
    "lumped_capacity",
    "lumped_mean_hitting",
    "write_chain_table",
    "write_free_energy_curve",
]


@dataclass(frozen=True)
class FreeEnergySpec:
    beta: float
    h: float = 0.0
    pbar: float = 1.0
    k_j: float = 1.0
    grid: int = 2001

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if not 0 <= self.pbar <= self.k_j:
            raise ConfigError(f"pbar must lie in [0, k_j], got {self.pbar}")
        if self.grid < 3:
            raise ConfigError("grid needs at least three points")


def free_energy(x, spec: FreeEnergySpec):
    """Free energy per vertex of the annealed model at magnetization ``x``.

    ``-pbar x^2/2 - h x + (1/beta) sum_{s=+-} (1+s x)/2 log((1+s x)/2) + log 2``,
    with ``0 log 0 = 0`` at the endpoints.
    """
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 1):
        raise ConfigError("free energy is defined on [-1, 1]")
    a, b = (1 - x) / 2, (1 + x) / 2
    ent = xlogy(a, a) + xlogy(b, b)
    out = -spec.pbar * x**2 / 2 - spec.h * x + ent / spec.beta + math.log(2.0)
    return out if out.ndim else float(out)


def free_energy_derivative(x, spec: FreeEnergySpec):
    x = np.asarray(x, dtype=float)
    return -spec.pbar * x - spec.h + np.arctanh(x) / spec.beta


def _free_energy_curvature(x, spec: FreeEnergySpec):
    return -spec.pbar + 1.0 / (spec.beta * (1.0 - x * x))


def local_minima(spec: FreeEnergySpec, n_grid: int = 20001):
    """Stationary points of the free energy, sorted, with their type.

    Roots of ``x = tanh(beta (pbar x + h))`` are bracketed on a grid uniform
    in ``atanh(x)`` (so points near +-1 are resolved) and refined with
    Brent's method.  Returns a list of ``(x, kind)`` with kind ``min``,
    ``max`` or ``flat``.
    """
    # F' > 0 beyond atanh(x) > beta (pbar + |h|), so this range holds every root
    umax = spec.beta * (spec.pbar + abs(spec.h)) + 1.0
    u = np.linspace(-umax, umax, n_grid)
    x = np.tanh(u)
    g = free_energy_derivative(x, spec)
    out = []
    for i in np.flatnonzero(g == 0):
        out.append(float(x[i]))
    for i in np.flatnonzero(g[:-1] * g[1:] < 0):
        out.append(brentq(lambda t: float(free_energy_derivative(t, spec)), x[i], x[i + 1],
                          xtol=1e-15, rtol=4 * np.finfo(float).eps))
    res = []
    for r in sorted(set(out)):
        c = _free_energy_curvature(r, spec)
        kind = "min" if c > 1e-12 else "max" if c < -1e-12 else "flat"
        res.append((r, kind))
    return res


def critical_field(beta: float, pbar: float = 1.0) -> float:
    """Field strength at which the metastable free-energy minimum disappears.

    ``pbar x_s - atanh(x_s)/beta`` with ``x_s = sqrt(1 - 1/(beta pbar))``; for
    ``pbar = 1`` this is ``sqrt(1 - 1/beta) - log(beta (1 + sqrt(1 - 1/beta))^2) / (2 beta)``.
    """
    if not beta * pbar > 1:
        raise ConfigError(f"no critical field in the single-phase regime beta*pbar={beta * pbar} <= 1")
    xs = math.sqrt(1.0 - 1.0 / (beta * pbar))
    return pbar * xs - math.atanh(xs) / beta


def spinodal_field(beta: float, pbar: float = 1.0) -> float:
    """Critical field found numerically, without the closed form.

    A field ``h`` is stationary at ``x`` iff ``h = atanh(x)/beta - pbar x``.
    For ``h > 0`` the metastable minimum lives at negative ``x`` and merges
    with the saddle at the local maximum of this curve on ``(-1, 0)``.
    """
    if not beta * pbar > 1:
        raise ConfigError("no spinodal in the single-phase regime")
    res = minimize_scalar(lambda x: pbar * x - math.atanh(x) / beta, bounds=(-1 + 1e-15, 0.0),
                          method="bounded", options={"xatol": 1e-13, "maxiter": 2000})
    return -float(res.fun)


def nearest_level(m: float, n_sites: int) -> int:
    """Up-spin count of the grid magnetization nearest to ``m``; ties go down."""
    k = n_sites * (1.0 + m) / 2.0
    lo = math.floor(k)
    # distances in magnetization units are 2/N times distances in k
    return lo if (k - lo) <= (lo + 1 - k) else lo + 1


def metastable_sets(spec: FreeEnergySpec, n_sites: int):
    """Magnetization pre-image sets of the two free-energy minima.

    Returns ``(M1, M2, m1, m2)`` with ``M1`` the set of larger Gibbs weight
    under the lumped chain (ties keep the lower magnetization first).
    """
    minima = [x for x, kind in local_minima(spec) if kind == "min"]
    if len(minima) != 2:
        raise ConfigError(f"free energy has {len(minima)} local minima, need two "
                          f"(beta*pbar={spec.beta * spec.pbar}, h={spec.h})")
    levels = [nearest_level(x, n_sites) for x in minima]
    if levels[0] == levels[1]:
        raise ConfigError(f"both minima round to the same grid level at N={n_sites}")
    chain = BirthDeathChain(n_sites, spec.beta, spec.h, spec.pbar)
    order = sorted(range(2), key=lambda i: -chain.log_mu[levels[i]])
    sets, ms = [], []
    for rank, i in enumerate(order):
        k = levels[i]
        sets.append(StateSet(n_sites, levels=[k], label=f"M{rank + 1}"))
        ms.append((2 * k - n_sites) / n_sites)
    return sets[0], sets[1], ms[0], ms[1]


class BirthDeathChain:
    """Exact lumping of the annealed Metropolis chain onto magnetization levels.

    Attributes
    ----------
    m : ndarray
        Magnetization of each level ``k = 0..N``.
    energy : ndarray
        Lumped Hamiltonian at each level.
    log_mu : ndarray
        Log of the lumped Gibbs weights (normalized).
    up, down : ndarray
        Rates ``k -> k+1`` and ``k -> k-1`` (zero at the ends).
    log_cond : ndarray
        ``log(mu(k) up(k))`` for the edge ``k -- k+1``, length ``N``.
    """

    def __init__(self, n_sites: int, beta: float, h: float = 0.0, pbar: float = 1.0):
        if n_sites < 1:
            raise ConfigError("n_sites must be positive")
        if not beta > 0:
            raise ConfigError("beta must be positive")
        self.n_sites, self.beta, self.h, self.pbar = int(n_sites), float(beta), float(h), float(pbar)
        n = self.n_sites
        k = np.arange(n + 1, dtype=float)
        self.levels = k.astype(np.int64)
        self.m = (2 * k - n) / n
        self.energy = -pbar * n * self.m**2 / 2 + pbar / 2 - h * n * self.m
        log_w = gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0) - beta * self.energy
        self.log_z = float(logsumexp(log_w))
        self.log_mu = log_w - self.log_z
        dh = np.diff(self.energy)
        self.up = np.zeros(n + 1)
        self.down = np.zeros(n + 1)
        self.up[:-1] = (n - k[:-1]) * np.exp(-beta * np.maximum(dh, 0.0))
        self.down[1:] = k[1:] * np.exp(-beta * np.maximum(-dh, 0.0))
        self.log_cond = self.log_mu[:-1] + np.log(self.up[:-1])

    @property
    def mu(self) -> np.ndarray:
        return np.exp(self.log_mu)

    def level_of(self, m: float) -> int:
        k = self.n_sites * (1.0 + m) / 2.0
        if abs(k - round(k)) > 1e-9:
            raise ConfigError(f"magnetization {m} is not a grid level for N={self.n_sites}")
        return int(round(k))

    def detailed_balance_error(self) -> float:
        """Largest relative mismatch of ``mu(k) up(k)`` and ``mu(k+1) down(k+1)``."""
        lhs = self.log_mu[:-1] + np.log(self.up[:-1])
        rhs = self.log_mu[1:] + np.log(self.down[1:])
        return float(np.max(np.abs(np.expm1(lhs - rhs))))

    def table(self, spec: FreeEnergySpec | None = None) -> dict:
        spec = spec or FreeEnergySpec(self.beta, self.h, self.pbar, k_j=max(1.0, self.pbar))
        return {
            "m": self.m,
            "F": free_energy(self.m, spec),
            "mu_hat": self.mu,
            "log_mu_hat": self.log_mu,
            "b": self.up,
            "d": self.down,
        }


@dataclass
class LumpedSolution:
    h: np.ndarray
    log_cap: float
    log_harm: float
    nu: np.ndarray

    @property
    def cap(self) -> float:
        return math.exp(self.log_cap)

    @property
    def harm(self) -> float:
        return math.exp(self.log_harm)

    @property
    def log_mean_hitting(self) -> float:
        return self.log_harm - self.log_cap


def _levels(chain: BirthDeathChain, s) -> np.ndarray:
    if isinstance(s, StateSet):
        if s.levels is None:
            raise ConfigError("the lumped chain needs magnetization-level sets")
        if s.n_sites != chain.n_sites:
            raise ConfigError("set and chain have different N")
        return np.asarray(s.levels, dtype=np.int64)
    lv = np.atleast_1d(np.asarray(s, dtype=np.int64))
    if np.any(lv < 0) or np.any(lv > chain.n_sites):
        raise ConfigError("levels out of range")
    return np.unique(lv)


def lumped_solve(chain: BirthDeathChain, a, b) -> LumpedSolution:
    """Equilibrium potential, capacity and harmonic sum on the level path.

    Between consecutive boundary levels the potential is linear in the
    cumulative resistance ``sum 1 / (mu up)``; beyond the outermost boundary
    level it is constant.
    """
    la, lb = _levels(chain, a), _levels(chain, b)
    if la.size == 0 or lb.size == 0:
        raise ConfigError("A and B must be non-empty")
    if np.intersect1d(la, lb).size:
        raise ConfigError("A and B overlap")
    n = chain.n_sites
    val = np.full(n + 1, np.nan)
    val[la], val[lb] = 1.0, 0.0
    bnd = np.flatnonzero(~np.isnan(val))
    h = val.copy()
    # log h and log(1 - h) are tracked separately so that values within
    # rounding of 0 or 1 keep their relative precision
    with np.errstate(divide="ignore"):
        log_h, log_g = np.log(val), np.log1p(-val)
    log_cap_terms = []
    for sl, v in ((slice(None, bnd[0]), bnd[0]), (slice(bnd[-1] + 1, None), bnd[-1])):
        h[sl], log_h[sl], log_g[sl] = val[v], log_h[v], log_g[v]
    for lo, hi in zip(bnd[:-1], bnd[1:]):
        if val[lo] == val[hi]:
            h[lo + 1: hi], log_h[lo + 1: hi], log_g[lo + 1: hi] = val[lo], log_h[lo], log_g[lo]
            continue
        # resistance of the segment and of its partial sums, in log space
        seg = -chain.log_cond[lo:hi]
        log_r = float(logsumexp(seg))
        # resistance before and after each interior level, relative to the total
        before = np.logaddexp.accumulate(seg)[:-1] - log_r
        after = np.logaddexp.accumulate(seg[::-1])[::-1][1:] - log_r
        near, far = (before, after) if val[lo] == 0.0 else (after, before)
        log_h[lo + 1: hi], log_g[lo + 1: hi] = near, far
        h[lo + 1: hi] = np.exp(near)
        log_cap_terms.append(-log_r)
    if not log_cap_terms:
        raise ConfigError("A and B are not separated by any edge")
    log_cap = float(logsumexp(log_cap_terms))
    log_harm = float(logsumexp(chain.log_mu + log_h))
    nu = _last_exit(chain, log_g, la)
    return LumpedSolution(h=h, log_cap=log_cap, log_harm=log_harm, nu=nu)


def _last_exit(chain: BirthDeathChain, log_g: np.ndarray, la: np.ndarray) -> np.ndarray:
    """Last-exit weights on the levels of A from ``log(1 - h)``, normalized."""
    n = chain.n_sites
    logs = np.full(n + 1, -np.inf)
    for k in la:
        terms = []
        if k < n:
            terms.append(chain.log_cond[k] + log_g[k + 1])
        if k > 0:
            terms.append(chain.log_cond[k - 1] + log_g[k - 1])
        logs[k] = logsumexp(terms)
    return np.exp(logs - logsumexp(logs))


def lumped_capacity(chain: BirthDeathChain, a, b) -> float:
    """Capacity between level sets; for single levels ``ka < kb`` this is the series
    ``[sum_{k=ka}^{kb-1} 1 / (mu(k) up(k))]^{-1}``."""
    return lumped_solve(chain, a, b).cap


def _log_hitting_one_sided(chain: BirthDeathChain, start: int, target: int) -> float:
    """``log E_start[tau_target]`` when nothing lies beyond ``start`` but reflection."""
    if start < target:
        log_mass = np.logaddexp.accumulate(chain.log_mu)
        j = np.arange(start, target)
        return float(logsumexp(log_mass[j] - chain.log_cond[j]))
    # mirror image: mass above, edges below
    log_mass = np.logaddexp.accumulate(chain.log_mu[::-1])[::-1]
    j = np.arange(target, start)
    return float(logsumexp(log_mass[j + 1] - chain.log_cond[j]))


def _hitting_banded(chain: BirthDeathChain, lb: np.ndarray) -> np.ndarray:
    """``E_k[tau_B]`` for all levels via a tridiagonal solve (moderate N only)."""
    n = chain.n_sites
    inner = np.setdiff1d(np.arange(n + 1), lb)
    u = np.zeros(n + 1)
    if inner.size == 0:
        return u
    up, down = chain.up, chain.down
    size = inner.size
    ab = np.zeros((3, size))
    pos = -np.ones(n + 1, dtype=np.int64)
    pos[inner] = np.arange(size)
    for r, k in enumerate(inner):
        ab[1, r] = up[k] + down[k]
        if k + 1 <= n and pos[k + 1] >= 0:
            ab[0, r + 1] = -up[k]
        if k - 1 >= 0 and pos[k - 1] >= 0:
            ab[2, r - 1] = -down[k]
    with np.errstate(over="raise", invalid="raise"):
        u[inner] = solve_banded((1, 1), ab, np.ones(size))
    return u


def lumped_mean_hitting(chain: BirthDeathChain, a, b) -> tuple[float, float]:
    """Log mean hitting time of B from the last-exit law on A, by two routes.

    Returns ``(log_via_identity, log_via_direct)``.  The direct route uses the
    closed-form passage-time series when B sits on one side of every level
    of A, and a tridiagonal solve otherwise.
    """
    sol = lumped_solve(chain, a, b)
    la, lb = _levels(chain, a), _levels(chain, b)
    logs = []
    one_sided = True
    for k in la:
        if sol.nu[k] == 0:
            continue
        above, below = lb[lb > k], lb[lb < k]
        if below.size and above.size:
            one_sided = False
            break
        target = int(above.min()) if above.size else int(below.max())
        # levels of A between k and target do not stop the walk
        logs.append(math.log(sol.nu[k]) + _log_hitting_one_sided(chain, int(k), target))
    if one_sided:
        direct = float(logsumexp(logs))
    else:
        u = _hitting_banded(chain, lb)
        direct = math.log(float(np.dot(sol.nu, u)))
    return sol.log_mean_hitting, direct


def write_chain_table(path, chain: BirthDeathChain, spec: FreeEnergySpec | None = None):
    """CSV with columns ``m, F, mu_hat, log_mu_hat, b, d``."""
    tab = chain.table(spec)
    cols = list(tab)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(chain.n_sites + 1):
            w.writerow([repr(float(tab[c][i])) for c in cols])


def write_free_energy_curve(path, spec: FreeEnergySpec):
    """CSV with columns ``x, F`` on ``spec.grid`` points of [-1, 1]."""
    x = np.linspace(-1.0, 1.0, spec.grid)
    f = free_energy(x, spec)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "F"])
        for xi, fi in zip(x, f):
            w.writerow([repr(float(xi)), repr(float(fi))])

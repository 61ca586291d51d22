"""
Continuous-time Glauber-Metropolis dynamics.

Flip rates are ``exp(-beta [H(sigma^k) - H(sigma)]_+)``.  Trajectories are
simulated exactly (Gillespie): exponential holding times with the total
rate, then a site drawn proportionally to its rate.  Local fields
``g_k = (1/N) sum_j J_kj s_j + h`` are cached and updated in O(N) per jump.

Targets are either state masks over ``[0, 2^N)`` or magnetization-level
sets (numbers of up spins), the latter usable at any N up to 62.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TextIO

import numpy as np
from numba import njit

from .disorder import CouplingMatrix
from .exceptions import BudgetExhausted, ConfigError
from .model import ModelParams, SpinConfig, _as_spins, index_from_spins, spins_from_index
from .potential import StateSet

__all__ = [
    "RateQuery",
    "HittingSample",
    "ReturnSample",
    "metropolis_rate",
    "rates",
    "step",
    "first_hitting",
    "first_return",
    "sample_hitting_times",
    "sample_initial",
    "occupation_times",
    "write_trajectory",
    "trajectory_seed",
    "DEFAULT_BUDGET",
]

DEFAULT_BUDGET = 10**9
_REFRESH = 1 << 16  # jumps between exact recomputations of the local fields


def metropolis_rate(delta_h, beta: float):
    """``exp(-beta max(delta_h, 0))``."""
    d = np.maximum(np.asarray(delta_h, dtype=float), 0.0)
    out = np.exp(-beta * d)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class RateQuery:
    sigma: SpinConfig
    rates: np.ndarray
    total: float


@dataclass(frozen=True)
class HittingSample:
    """Outcome of one hitting run.

    ``truncated`` is set when the jump budget ran out first; ``elapsed_time``
    and ``jump_count`` then describe the censored run.
    """

    elapsed_time: float
    jump_count: int
    exit_flag: bool
    truncated: bool = False
    end_index: int = -1


@dataclass(frozen=True)
class ReturnSample:
    hit_b_first: bool
    sample: HittingSample


def rates(cm: CouplingMatrix, params: ModelParams, sigma) -> RateQuery:
    s = _as_spins(sigma, params.n_sites)
    field = cm.symmetric() @ s / params.n_sites + params.h
    r = metropolis_rate(2.0 * s * field, params.beta)
    return RateQuery(SpinConfig.from_spins(s.astype(np.int8)), r, float(math.fsum(r)))


def step(sigma, cm: CouplingMatrix, params: ModelParams, rng: np.random.Generator):
    """One jump of the chain: returns ``(sigma', holding_time, site)``."""
    q = rates(cm, params, sigma)
    hold = rng.exponential(1.0 / q.total)
    k = int(rng.choice(params.n_sites, p=q.rates / q.rates.sum()))
    return q.sigma.flipped(k), float(hold), k


# numba kernels


@njit(cache=True)
def _fields(spins, sym, h, n):
    g = np.empty(n)
    for i in range(n):
        acc = 0.0
        for j in range(n):
            acc += sym[i, j] * spins[j]
        g[i] = acc / n + h
    return g


@njit(cache=True)
def _member(idx, ups, state_mask, level_mask):
    if state_mask.size > 0:
        return state_mask[idx] != 0
    return level_mask[ups] != 0


@njit(cache=True)
def _run(spins0, sym, h, beta, state_a, level_a, state_b, level_b, mode, budget, seed):
    """Core loop.

    mode 0: first hitting of B.  mode 1: first entrance into A (from outside)
    or B, starting in A.  Returns (time, jumps, status, exit_flag, end_index)
    with status 0 = reached B, 1 = reached A, 2 = budget exhausted.
    """
    np.random.seed(seed)
    n = spins0.size
    spins = spins0.astype(np.float64)
    idx = 0
    ups = 0
    for i in range(n):
        if spins[i] > 0:
            ups += 1
            if n <= 62:
                idx |= 1 << i
    g = _fields(spins, sym, h, n)
    r = np.empty(n)
    t = 0.0
    jumps = 0
    was_in_a = True
    left_a = False
    while jumps < budget:
        total = 0.0
        for k in range(n):
            d = 2.0 * spins[k] * g[k]
            r[k] = np.exp(-beta * d) if d > 0 else 1.0
            total += r[k]
        t += -np.log(1.0 - np.random.random()) / total
        u = np.random.random() * total
        k = 0
        acc = r[0]
        while acc <= u and k < n - 1:
            k += 1
            acc += r[k]
        spins[k] = -spins[k]
        if n <= 62:
            idx ^= 1 << k
        ups += 1 if spins[k] > 0 else -1
        jumps += 1
        if jumps % _REFRESH == 0:
            g = _fields(spins, sym, h, n)
        else:
            c = 2.0 * spins[k] / n
            for j in range(n):
                g[j] += c * sym[j, k]
        if _member(idx, ups, state_b, level_b):
            return t, jumps, 0, left_a, idx
        if mode == 1:
            in_a = _member(idx, ups, state_a, level_a)
            if not in_a:
                left_a = True
            elif not was_in_a:
                return t, jumps, 1, left_a, idx
            was_in_a = in_a
    return t, jumps, 2, left_a, idx


_EMPTY_U8 = np.zeros(0, dtype=np.uint8)


def _target_arrays(s, n_sites: int):
    """(state_mask, level_mask) arrays for the kernel; one of them is empty."""
    if isinstance(s, StateSet):
        if s.n_sites != n_sites:
            raise ConfigError("state set and model have different N")
        if s.levels is not None:
            lv = np.zeros(n_sites + 1, dtype=np.uint8)
            lv[list(s.levels)] = 1
            return _EMPTY_U8, lv
        return s.mask().astype(np.uint8), _EMPTY_U8
    m = np.asarray(s)
    if m.dtype == bool and m.size == (1 << n_sites):
        return m.astype(np.uint8), _EMPTY_U8
    raise ConfigError("targets must be StateSets or boolean state masks")


def _contains(s, index: int, n_sites: int) -> bool:
    if isinstance(s, StateSet):
        return index in s
    return bool(np.asarray(s)[index])


def trajectory_seed(rng: np.random.Generator) -> int:
    """32-bit seed for the compiled kernel, drawn from ``rng``."""
    return int(rng.integers(0, 2**31 - 1))


def sample_initial(dist, rng: np.random.Generator, n_sites: int) -> int:
    """Draw a configuration index from a state-indexed probability vector."""
    p = np.asarray(dist, dtype=float)
    if p.shape != (1 << n_sites,):
        raise ConfigError(f"initial distribution must have 2^{n_sites} entries")
    if np.any(p < 0) or not math.isclose(p.sum(), 1.0, rel_tol=1e-9):
        raise ConfigError("initial distribution must be a probability vector")
    return int(rng.choice(p.size, p=p / p.sum()))


def _start_index(start, rng, params) -> int:
    if isinstance(start, SpinConfig):
        return start.index
    if isinstance(start, (int, np.integer)):
        return int(start)
    arr = np.asarray(start)
    if arr.ndim == 1 and arr.size == params.n_sites and np.all(np.abs(arr) == 1):
        return index_from_spins(arr)
    return sample_initial(arr, rng, params.n_sites)


def first_hitting(start, target, cm: CouplingMatrix, params: ModelParams,
                  rng: np.random.Generator, budget: int = DEFAULT_BUDGET,
                  raise_on_budget: bool = False) -> HittingSample:
    """Time until the chain started at ``start`` first enters ``target``.

    ``start`` is a configuration (index, spins or SpinConfig) or a
    state-indexed initial distribution.  A start inside the target is an
    error; use :func:`first_return` for return times.
    """
    n = params.n_sites
    i0 = _start_index(start, rng, params)
    if _contains(target, i0, n):
        raise ConfigError("start lies in the target; use first_return for return times")
    sb, lb = _target_arrays(target, n)
    t, jumps, status, _, end = _run(spins_from_index(i0, n), cm.symmetric(), float(params.h),
                                    float(params.beta), _EMPTY_U8, _EMPTY_U8, sb, lb, 0,
                                    int(budget), trajectory_seed(rng))
    out = HittingSample(t, int(jumps), True, status == 2, int(end))
    if out.truncated and raise_on_budget:
        raise BudgetExhausted(f"no hit within {budget} jumps")
    return out


def first_return(start, a, b, cm: CouplingMatrix, params: ModelParams,
                 rng: np.random.Generator, budget: int = DEFAULT_BUDGET,
                 raise_on_budget: bool = False) -> ReturnSample:
    """Race between reaching B and re-entering A, from ``start`` in A.

    A jump that stays inside A is not a return: the chain must leave A and
    come back.  ``hit_b_first`` is False when the run ends by re-entering A
    (or by running out of budget, flagged in ``sample.truncated``).
    """
    n = params.n_sites
    i0 = _start_index(start, rng, params)
    if not _contains(a, i0, n):
        raise ConfigError("first_return needs a start inside A")
    if isinstance(a, StateSet) and isinstance(b, StateSet):
        if not a.isdisjoint(b):
            raise ConfigError("A and B overlap")
    sa, la = _target_arrays(a, n)
    sb, lb = _target_arrays(b, n)
    t, jumps, status, left, end = _run(spins_from_index(i0, n), cm.symmetric(), float(params.h),
                                       float(params.beta), sa, la, sb, lb, 1, int(budget),
                                       trajectory_seed(rng))
    sample = HittingSample(t, int(jumps), bool(left), status == 2, int(end))
    if sample.truncated and raise_on_budget:
        raise BudgetExhausted(f"no return or hit within {budget} jumps")
    return ReturnSample(status == 0, sample)


def sample_hitting_times(start, target, cm: CouplingMatrix, params: ModelParams,
                         n_runs: int, seed: int = 0, budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """Hitting times of ``n_runs`` independent trajectories.

    Run ``i`` uses the stream ``SeedSequence(seed, spawn_key=(3, i))``, so
    results do not depend on how runs are scheduled.  Truncated runs are
    returned as ``nan``.
    """
    out = np.empty(n_runs)
    for i in range(n_runs):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(3, i))))
        s = first_hitting(start, target, cm, params, rng, budget)
        out[i] = np.nan if s.truncated else s.elapsed_time
    return out


@njit(cache=True)
def _occupation(spins0, sym, h, beta, n_jumps, seed):
    np.random.seed(seed)
    n = spins0.size
    spins = spins0.astype(np.float64)
    idx = 0
    for i in range(n):
        if spins[i] > 0:
            idx |= 1 << i
    occ = np.zeros(1 << n)
    g = _fields(spins, sym, h, n)
    r = np.empty(n)
    for jump in range(n_jumps):
        total = 0.0
        for k in range(n):
            d = 2.0 * spins[k] * g[k]
            r[k] = np.exp(-beta * d) if d > 0 else 1.0
            total += r[k]
        occ[idx] += -np.log(1.0 - np.random.random()) / total
        u = np.random.random() * total
        k = 0
        acc = r[0]
        while acc <= u and k < n - 1:
            k += 1
            acc += r[k]
        spins[k] = -spins[k]
        idx ^= 1 << k
        c = 2.0 * spins[k] / n
        for j in range(n):
            g[j] += c * sym[j, k]
    return occ


def occupation_times(start, cm: CouplingMatrix, params: ModelParams, n_jumps: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Time spent in each configuration over ``n_jumps`` jumps."""
    params.require_enumerable()
    i0 = _start_index(start, rng, params)
    return _occupation(spins_from_index(i0, params.n_sites), cm.symmetric(), float(params.h),
                       float(params.beta), int(n_jumps), trajectory_seed(rng))


def write_trajectory(stream: TextIO, start, cm: CouplingMatrix, params: ModelParams,
                     rng: np.random.Generator, n_jumps: int):
    """Write ``time site magnetization`` lines for ``n_jumps`` jumps (debug aid)."""
    sigma = SpinConfig(_start_index(start, rng, params), params.n_sites)
    t = 0.0
    stream.write("# time site magnetization\n")
    for _ in range(n_jumps):
        sigma, hold, k = step(sigma, cm, params, rng)
        t += hold
        stream.write(f"{t!r} {k} {sigma.magnetization!r}\n")
    return sigma

"""
Disorder Monte Carlo: many coupling replicas, exact observables per replica,
and empirical checks of the concentration and comparison bounds.

Every replica is a pure function of ``(config, replica_index)``; replicas
may run in worker processes and are reduced after sorting by index, so
results never depend on the worker count.
"""
from __future__ import annotations

import concurrent.futures as cf
import csv
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .annealed import FreeEnergySpec, metastable_sets, nearest_level
from .disorder import DisorderSpec, RandomSeed, alpha_n, annealed_couplings, sample_couplings
from .exceptions import ConfigError, InsufficientReplicas, MetastabError
from .model import ModelParams, log_conditional_mgf_exact, xi_check
from .potential import GlauberNetwork, MetaSpec, StateSet, metastable_partition

__all__ = [
    "ExperimentConfig",
    "ReplicaResult",
    "TailReport",
    "MomentReport",
    "default_a_n",
    "resolve_metaspec",
    "run_replicas",
    "capacity_concentration_report",
    "harmonic_concentration_report",
    "ratio_tail_report",
    "ratio_moment_report",
    "mgf_report",
    "mcdiarmid_harness",
    "xi_tail_report",
    "localization_report",
    "run_experiment",
    "write_report_csv",
    "CONFIG_SCHEMA_VERSION",
]

CONFIG_SCHEMA_VERSION = 1


def default_a_n(k_j: float, k1: float, n_sites: int) -> float:
    """``sqrt(2 k_J (k_1 + log 2) N)``."""
    return math.sqrt(2.0 * k_j * (k1 + math.log(2.0)) * n_sites)


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of a disorder experiment.

    ``set_mode`` is ``auto`` (free-energy minima of the annealed model, which
    needs a constant mean coupling) or ``magnetization`` (``set_values`` lists
    one magnetization per metastable set; each is rounded to the nearest grid
    level for every N, ties downward).
    """

    n_sites: int = 12
    beta: float = 1.5
    h: float = 0.05
    k_j: float = 1.0
    enum_limit: int = 20
    disorder: dict = field(default_factory=lambda: {"kind": "erdos_renyi", "p": 0.5})
    set_mode: str = "auto"
    set_values: tuple = ()
    target_index: int = 2
    k1: float = 0.1
    k2: float = 0.1
    replicas: int = 200
    master_seed: int = 0
    fixed_environment: bool = True
    t_grid: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    ratio_t_grid: tuple = (1.0, 2.0, 3.0, 4.0, 5.0)
    q_list: tuple = (1, 2)
    sizes: tuple = (8, 10, 12)
    a_n: float | None = None
    slack: float = 0.02
    c_shift: float = 0.0
    localization_threshold: float = 0.05
    moment_c_max: float = 100.0
    mgf_sizes: tuple = (8, 12, 16)
    mgf_samples: int = 100
    mgf_seed: int = 0

    def __post_init__(self):
        for name in ("set_values", "t_grid", "ratio_t_grid", "q_list", "sizes", "mgf_sizes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "disorder", dict(self.disorder))
        if self.replicas < 2:
            raise InsufficientReplicas(f"need at least 2 replicas, got {self.replicas}")
        if any(t <= 0 for t in self.t_grid + self.ratio_t_grid):
            raise ConfigError("t grids must be positive")
        if any(q < 1 for q in self.q_list):
            raise ConfigError("moment orders must be >= 1")
        if self.set_mode not in ("auto", "magnetization"):
            raise ConfigError(f"unknown set_mode {self.set_mode!r}")
        if self.set_mode == "magnetization" and len(self.set_values) < 2:
            raise ConfigError("explicit sets need at least two magnetizations")
        if self.a_n is not None and self.a_n < 0:
            raise ConfigError("a_n must be non-negative")
        self.model_params()
        self.disorder_spec()

    def model_params(self, n_sites: int | None = None) -> ModelParams:
        return ModelParams(n_sites or self.n_sites, self.beta, self.h, self.k_j, self.enum_limit)

    def disorder_spec(self, n_sites: int | None = None) -> DisorderSpec:
        d = dict(self.disorder)
        d["n_sites"] = n_sites or self.n_sites
        d.setdefault("k_j", self.k_j)
        return DisorderSpec.from_dict(d)

    def resolved_a_n(self, n_sites: int | None = None) -> float:
        if self.a_n is not None:
            return float(self.a_n)
        return default_a_n(self.k_j, self.k1, n_sites or self.n_sites)

    def with_size(self, n_sites: int) -> "ExperimentConfig":
        return dataclasses.replace(self, n_sites=n_sites)

    def seed(self, index: int) -> RandomSeed:
        return RandomSeed(self.master_seed, index, 0 if self.fixed_environment else None)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        d["schema_version"] = CONFIG_SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class ReplicaResult:
    replica_index: int
    master_seed: int
    environment_index: int
    log_z: float = math.nan
    log_z_cap: float = math.nan
    log_z_harm: float = math.nan
    log_mean_hitting: float = math.nan
    log_mean_hitting_direct: float = math.nan
    alpha_n: float = math.nan
    xi_in: bool = False
    max_dev: float = math.nan
    a_n: float = math.nan
    valley_ratio: float = math.nan
    ann_log_z_cap: float = math.nan
    ann_log_z_harm: float = math.nan
    ann_log_mean_hitting: float = math.nan
    failed: bool = False
    error: str = ""

    @property
    def log_ratio(self) -> float:
        """Log of quenched over annealed mean hitting time."""
        return self.log_mean_hitting - self.ann_log_mean_hitting

    @property
    def ratio(self) -> float:
        return math.exp(self.log_ratio)


def _constant_mean(spec: DisorderSpec) -> float:
    if spec.kind == "erdos_renyi":
        return spec.p
    if spec.kind == "diluted_hopfield" and spec.pattern_law == "constant":
        return spec.p * spec.n_patterns * spec.pattern_value**2
    raise ConfigError(f"automatic metastable sets need a constant mean coupling; "
                      f"{spec.kind} has none, give explicit sets")


def resolve_metaspec(config: ExperimentConfig, n_sites: int | None = None) -> MetaSpec:
    """Metastable sets for size ``n_sites``, ordered by annealed Gibbs weight."""
    n = n_sites or config.n_sites
    if config.set_mode == "auto":
        pbar = _constant_mean(config.disorder_spec(n))
        m1, m2, _, _ = metastable_sets(FreeEnergySpec(config.beta, config.h, pbar, k_j=config.k_j), n)
        sets = [m1, m2]
        return MetaSpec(tuple(sets), config.target_index, config.k1, config.k2)
    levels = [nearest_level(float(m), n) for m in config.set_values]
    if len(set(levels)) != len(levels):
        raise ConfigError(f"explicit magnetizations collide on the N={n} grid: levels {levels}")
    sets = [StateSet(n, levels=[k], label=f"m={(2 * k - n) / n:+.4f}") for k in levels]
    return MetaSpec(tuple(sets), config.target_index, config.k1, config.k2)


class _AnnealedReference:
    """Annealed observables and valley of the target set, per environment."""

    def __init__(self, config: ExperimentConfig, cm, ms_raw: MetaSpec):
        params = config.model_params(cm.n_sites)
        ann = annealed_couplings(cm)
        net = GlauberNetwork.from_couplings(ann, params)
        weights = [net.measure(s) for s in ms_raw.sets]
        ms = ms_raw.ordered_by(weights)
        sol = net.solve(ms.target_a, ms.target_b)
        part = metastable_partition(ann, params, ms, net=net)
        self.ms = ms
        self.valley = part == (ms.index - 1)
        self.log_z_cap = sol.log_z_cap
        self.log_z_harm = sol.log_z_harm
        self.log_mean_hitting = sol.log_mean_hitting_time


_REF_CACHE: dict = {}


def _reference(config: ExperimentConfig, cm, env: int) -> _AnnealedReference:
    key = (json.dumps(config.to_dict(), sort_keys=True), cm.n_sites, env)
    ref = _REF_CACHE.get(key)
    if ref is None:
        if len(_REF_CACHE) > 64:
            _REF_CACHE.clear()
        ref = _AnnealedReference(config, cm, resolve_metaspec(config, cm.n_sites))
        _REF_CACHE[key] = ref
    return ref


def run_replica(config: ExperimentConfig, index: int) -> ReplicaResult:
    """Exact observables for one disorder replica."""
    seed = config.seed(index)
    res = ReplicaResult(index, config.master_seed, seed.environment)
    try:
        params = config.model_params()
        params.require_enumerable()
        cm = sample_couplings(config.disorder_spec(), seed)
        ref = _reference(config, cm, seed.environment)
        net = GlauberNetwork.from_couplings(cm, params)
        a, b = ref.ms.target_a, ref.ms.target_b
        sol = net.solve(a, b)
        res.log_z = sol.log_z
        res.log_z_cap = sol.log_z_cap
        res.log_z_harm = sol.log_z_harm
        res.log_mean_hitting = sol.log_mean_hitting_time
        res.log_mean_hitting_direct = math.log(net.mean_hitting_direct(b, sol.nu))
        res.alpha_n = alpha_n(cm, config.beta)
        res.a_n = config.resolved_a_n()
        res.xi_in, res.max_dev = xi_check(cm, params, res.a_n)
        res.valley_ratio = sol.harm / net.measure(ref.valley)
        res.ann_log_z_cap = ref.log_z_cap
        res.ann_log_z_harm = ref.log_z_harm
        res.ann_log_mean_hitting = ref.log_mean_hitting
    except (MetastabError, ArithmeticError, np.linalg.LinAlgError) as exc:
        res.failed = True
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def _replica_chunk(config_dict: dict, indices: list) -> list:
    config = ExperimentConfig.from_dict(config_dict)
    return [run_replica(config, i) for i in indices]


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("METASTAB_THREADS")
        threads = int(env) if env else 1
    if threads < 1:
        raise ConfigError("thread count must be positive")
    return threads


def run_replicas(config: ExperimentConfig, threads: int | None = None,
                 indices=None) -> list:
    """Run all replicas (or ``indices``) and return them sorted by index.

    Fails fast only on configuration problems; per-replica solver failures
    are recorded in the results.
    """
    config.model_params().require_enumerable()
    resolve_metaspec(config)
    idx = list(range(config.replicas)) if indices is None else sorted(indices)
    threads = resolve_threads(threads)
    if threads == 1 or len(idx) < 2 * threads:
        out = [run_replica(config, i) for i in idx]
    else:
        chunks = [idx[j::threads] for j in range(threads)]
        d = config.to_dict()
        out = []
        with cf.ProcessPoolExecutor(max_workers=threads) as pool:
            for part in pool.map(_replica_chunk, [d] * len(chunks), chunks):
                out.extend(part)
    return sorted(out, key=lambda r: r.replica_index)


# reports


def _binom_se(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / n) if n > 0 else math.nan


@dataclass
class TailReport:
    """Per-t comparison of empirical frequencies with a theoretical envelope.

    Rows hold ``t, empirical, stderr, bound, vacuous, pass``.  Vacuous rows
    (envelope >= 1, or confidence <= 0) are reported but never counted as
    passes or failures.
    """

    name: str
    rows: list
    n_samples: int
    meta: dict = field(default_factory=dict)

    @property
    def failed_rows(self) -> list:
        return [r for r in self.rows if not r["vacuous"] and not r["pass"]]

    @property
    def informative_rows(self) -> list:
        return [r for r in self.rows if not r["vacuous"]]

    @property
    def status(self) -> str:
        if self.failed_rows:
            return "fail"
        return "pass" if self.informative_rows else "vacuous"

    @property
    def passed(self) -> bool:
        return self.status != "fail"


@dataclass
class MomentReport:
    name: str
    rows: list
    c_fit: float
    c_max: float
    meta: dict = field(default_factory=dict)

    @property
    def status(self) -> str:
        return "pass" if self.c_fit <= self.c_max else "fail"

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def _ok(results) -> list:
    return [r for r in results if not r.failed]


def _require(n: int, minimum: int, what: str):
    if n < minimum:
        raise InsufficientReplicas(f"{what} needs at least {minimum} replicas, got {n}")


def two_sided_tail(values, t_grid, center: float | None = None):
    """``(t, freq, stderr)`` of ``|values - center| > t``."""
    v = np.asarray(values, dtype=float)
    c = float(np.mean(v)) if center is None else center
    dev = np.abs(v - c)
    out = []
    for t in t_grid:
        f = float(np.mean(dev > t))
        out.append((float(t), f, _binom_se(f, v.size)))
    return out


def capacity_concentration_report(results, beta: float, k_j: float, t_grid,
                                  min_replicas: int = 100) -> TailReport:
    """Tail of mean-centred ``log(Z cap)`` against ``2 exp(-t^2 / (beta k_J)^2)``."""
    ok = _ok(results)
    _require(len(ok), min_replicas, "capacity concentration")
    vals = [r.log_z_cap for r in ok]
    rows = []
    for t, f, se in two_sided_tail(vals, t_grid):
        bound = 2.0 * math.exp(-t * t / (beta * k_j) ** 2)
        rows.append({"t": t, "empirical": f, "stderr": se, "bound": bound,
                     "vacuous": bound >= 1.0, "pass": f <= bound + 3.0 * se})
    return TailReport("capacity_concentration", rows, len(ok),
                      {"std": float(np.std(vals)), "mean": float(np.mean(vals))})


def harmonic_concentration_report(results, beta: float, k_j: float, t_grid, n_sites: int,
                                  k1: float, c_shift: float = 0.0, slack: float = 0.02,
                                  min_replicas: int = 100) -> TailReport:
    """Tail of mean-centred ``log(Z ||h||)`` against
    ``2 exp(-((t - c_N) / (beta k_J))^2) + exp(-k_1 N)`` plus ``slack``."""
    ok = _ok(results)
    _require(len(ok), min_replicas, "harmonic-sum concentration")
    vals = [r.log_z_harm for r in ok]
    rows = []
    for t, f, se in two_sided_tail(vals, t_grid):
        if t <= c_shift:
            bound = math.inf
        else:
            bound = 2.0 * math.exp(-((t - c_shift) / (beta * k_j)) ** 2) + math.exp(-k1 * n_sites)
        rows.append({"t": t, "empirical": f, "stderr": se, "bound": bound,
                     "vacuous": bound >= 1.0, "pass": f <= bound + slack})
    return TailReport("harmonic_concentration", rows, len(ok),
                      {"std": float(np.std(vals)), "c_shift": c_shift, "slack": slack})


def ratio_tail_report(results, beta: float, k_j: float, t_grid, slack: float = 0.02,
                      min_replicas: int = 100) -> TailReport:
    """Frequency of ``exp(-t - a) <= ratio <= exp(t + 2a)`` with ``a = alpha_N``.

    Compared with ``1 - 4 exp(-t^2 / (2 beta k_J)^2) - slack``; a
    non-positive confidence marks the row vacuous.
    """
    ok = _ok(results)
    _require(len(ok), min_replicas, "ratio tail")
    lr = np.array([r.log_ratio for r in ok])
    al = np.array([r.alpha_n for r in ok])
    rows = []
    for t in t_grid:
        inside = (lr >= -t - al) & (lr <= t + 2 * al)
        f = float(np.mean(inside))
        conf = 1.0 - 4.0 * math.exp(-t * t / (2 * beta * k_j) ** 2)
        rows.append({"t": float(t), "empirical": f, "stderr": _binom_se(f, lr.size), "bound": conf,
                     "vacuous": conf <= 0.0, "pass": f >= conf - slack})
    return TailReport("ratio_tail", rows, len(ok),
                      {"slack": slack, "log_ratio_mean": float(lr.mean()),
                       "log_ratio_std": float(lr.std()), "alpha_n": float(al.mean())})


def ratio_moment_report(results_by_size: dict, q_list, c_max: float = 100.0,
                        min_replicas: int = 2) -> MomentReport:
    """Fit the smallest ``c`` with
    ``exp(-a)(1 - c/sqrt(N)) <= ||ratio||_q <= exp(4 q a)(1 + c/sqrt(N))``
    for every size and order, ``a = alpha_N``.
    """
    rows = []
    c_fit = 0.0
    for n in sorted(results_by_size):
        ok = _ok(results_by_size[n])
        _require(len(ok), min_replicas, "ratio moments")
        lr = np.array([r.log_ratio for r in ok])
        a = float(np.mean([r.alpha_n for r in ok]))
        for q in q_list:
            # log-mean-exp keeps large ratios finite
            norm = math.exp((np.logaddexp.reduce(q * lr) - math.log(lr.size)) / q)
            c_low = math.sqrt(n) * (1.0 - norm * math.exp(a))
            c_up = math.sqrt(n) * (norm * math.exp(-4 * q * a) - 1.0)
            need = max(0.0, c_low, c_up)
            c_fit = max(c_fit, need)
            rows.append({"N": n, "q": q, "norm": norm, "alpha_n": a, "c_needed": need,
                         "n_replicas": len(ok)})
    for r in rows:
        lo = math.exp(-r["alpha_n"]) * (1 - c_fit / math.sqrt(r["N"]))
        hi = math.exp(4 * r["q"] * r["alpha_n"]) * (1 + c_fit / math.sqrt(r["N"]))
        r.update({"lower": lo, "upper": hi, "margin_lower": r["norm"] - lo,
                  "margin_upper": hi - r["norm"]})
    return MomentReport("ratio_moments", rows, c_fit, c_max)


def mgf_report(spec_for_size, beta: float, h: float, k_j: float, sizes, n_sigma: int = 100,
               seed: int = 0) -> TailReport:
    """``|log E[exp(+-beta Delta_N(sigma))] - alpha_N| <= (beta k_J)^3 / (2N)``.

    ``spec_for_size(N)`` returns the disorder law at size N.  Random
    configurations are drawn uniformly with a fixed seed.
    """
    rows = []
    for n in sizes:
        spec = spec_for_size(n)
        cm = sample_couplings(spec, RandomSeed(seed, 0, 0))
        params = ModelParams(n, beta, h, k_j)
        a = alpha_n(cm, beta)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(4, n))))
        bound = (beta * k_j) ** 3 / (2.0 * n)
        worst, fails = 0.0, 0
        for _ in range(n_sigma):
            sigma = rng.choice(np.array([-1.0, 1.0]), size=n)
            for sign in (1, -1):
                err = abs(log_conditional_mgf_exact(cm, params, sigma, sign) - a)
                worst = max(worst, err)
                fails += err > bound
        rows.append({"t": float(n), "N": n, "empirical": worst, "stderr": 0.0, "bound": bound,
                     "alpha_n": a, "failures": fails, "vacuous": False, "pass": fails == 0})
    return TailReport("mgf", rows, n_sigma)


def mcdiarmid_harness(values, c, t_grid, center: float | None = None) -> TailReport:
    """Empirical two-sided tail against ``exp(-t^2 / (2 v))``, ``v = sum(c^2) / 4``.

    ``values`` are i.i.d. evaluations of a function of independent inputs
    whose bounded-difference constants are ``c``.
    """
    if c is None:
        raise ConfigError("a bounded-difference certificate (per-coordinate c_i) is required")
    c = np.asarray(c, dtype=float)
    if c.size == 0 or np.any(c < 0) or not np.all(np.isfinite(c)):
        raise ConfigError("bounded-difference constants must be finite and non-negative")
    v = float(np.sum(c * c)) / 4.0
    rows = []
    for t, f, se in two_sided_tail(values, t_grid, center):
        bound = math.exp(-t * t / (2.0 * v)) if v > 0 else 0.0
        rows.append({"t": t, "empirical": f, "stderr": se, "bound": bound,
                     "vacuous": bound >= 1.0, "pass": f <= bound + 3.0 * se})
    return TailReport("mcdiarmid", rows, len(values), {"v": v})


def xi_tail_report(spec: DisorderSpec, params: ModelParams, a_values, replicas: int,
                   master_seed: int = 0, fixed_environment: bool = True) -> TailReport:
    """Frequency of ``max |H - H~| >= a_N`` against ``min(1, exp(-b_N))``."""
    from .model import XiSpec

    devs = np.empty(replicas)
    for i in range(replicas):
        seed = RandomSeed(master_seed, i, 0 if fixed_environment else None)
        devs[i] = xi_check(sample_couplings(spec, seed), params, 0.0)[1]
    rows = []
    for a in a_values:
        xs = XiSpec(float(a), params.k_j, params.n_sites)
        f = float(np.mean(devs >= a))
        se = _binom_se(f, replicas)
        rows.append({"t": float(a), "empirical": f, "stderr": se, "bound": xs.tail_bound,
                     "b_n": xs.b_n, "vacuous": xs.tail_bound >= 1.0,
                     "pass": f <= xs.tail_bound + 3.0 * se})
    return TailReport("xi_tail", rows, replicas, {"max_dev_max": float(devs.max())})


def localization_report(results_by_size: dict, threshold: float = 0.05) -> TailReport:
    """``|‖h‖_mu / mu[S] - 1|`` on replicas inside Xi, per N.

    Passes when the largest deviation at the largest N is at most
    ``threshold`` and strictly below the value at the smallest N.
    """
    rows = []
    for n in sorted(results_by_size):
        ok = _ok(results_by_size[n])
        on_xi = [r for r in ok if r.xi_in]
        dev = np.array([abs(r.valley_ratio - 1.0) for r in on_xi])
        rows.append({"t": float(n), "N": n, "empirical": float(dev.max()) if dev.size else math.nan,
                     "median": float(np.median(dev)) if dev.size else math.nan,
                     "stderr": 0.0, "bound": threshold, "excluded": len(ok) - len(on_xi),
                     "vacuous": False, "pass": bool(dev.size) and float(dev.max()) <= threshold})
    if rows:
        first, last = rows[0]["empirical"], rows[-1]["empirical"]
        trend = len(rows) < 2 or last < first
        for r in rows[:-1]:
            r["pass"] = True  # only the largest size is held to the threshold
        rows[-1]["pass"] = rows[-1]["pass"] and trend
    return TailReport("localization", rows, sum(len(v) for v in results_by_size.values()),
                      {"threshold": threshold})


# files


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report_csv(path, report, description: str = ""):
    """Write report rows with a ``#`` comment header naming the columns."""
    rows = report.rows
    cols = list(rows[0]) if rows else []
    with open(Path(path), "w", newline="") as fh:
        fh.write(f"# report: {report.name}\n")
        if description:
            for line in description.splitlines():
                fh.write(f"# {line}\n")
        fh.write(f"# status: {report.status}\n")
        fh.write(f"# columns: {', '.join(cols)}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])


def write_replicas_csv(path, results):
    cols = [f.name for f in dataclasses.fields(ReplicaResult)] + ["log_ratio"]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in results:
            vals = [getattr(r, c) for c in cols]
            w.writerow([_fmt(v) for v in vals])


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


_DESCRIPTIONS = {
    "capacity_concentration": "two-sided tail of mean-centred log(Z cap); bound 2 exp(-t^2/(beta k_J)^2); "
                              "pass if empirical <= bound + 3 stderr",
    "harmonic_concentration": "two-sided tail of mean-centred log(Z ||h||); bound "
                              "2 exp(-((t-c_N)/(beta k_J))^2) + exp(-k1 N); pass if empirical <= bound + slack",
    "ratio_tail": "frequency of exp(-t-alpha_N) <= ratio <= exp(t+2 alpha_N); bound is the confidence "
                  "1 - 4 exp(-t^2/(2 beta k_J)^2); pass if empirical >= bound - slack",
    "ratio_moments": "L^q norms of the hitting-time ratio and the sandwich with the fitted c",
    "mgf": "max over random sigma of |log E[exp(+-beta Delta)] - alpha_N| (t column holds N); "
           "bound (beta k_J)^3/(2N)",
    "localization": "max over replicas in Xi of |harmonic sum / mu[valley] - 1| (t column holds N)",
}


@dataclass
class ExperimentOutcome:
    reports: dict
    results: dict
    files: dict
    manifest_path: Path | None

    @property
    def failed(self) -> list:
        return [name for name, rep in self.reports.items() if rep.status == "fail"]


def run_experiment(config: ExperimentConfig, out_dir=None, threads: int | None = None,
                   figures: bool = False, progress=None) -> ExperimentOutcome:
    """Run every report of ``config`` and optionally write CSVs and a manifest."""
    started = datetime.now(timezone.utc)
    sizes = sorted(set(config.sizes) | {config.n_sites})
    results = {}
    for n in sizes:
        if progress:
            progress(f"running {config.replicas} replicas at N={n}")
        results[n] = run_replicas(config.with_size(n), threads)
    main = results[config.n_sites]
    reports = {
        "capacity_concentration": capacity_concentration_report(
            main, config.beta, config.k_j, config.t_grid, min_replicas=min(100, config.replicas)),
        "harmonic_concentration": harmonic_concentration_report(
            main, config.beta, config.k_j, config.t_grid, config.n_sites, config.k1,
            config.c_shift, config.slack, min_replicas=min(100, config.replicas)),
        "ratio_tail": ratio_tail_report(main, config.beta, config.k_j, config.ratio_t_grid,
                                        config.slack, min_replicas=min(100, config.replicas)),
        "ratio_moments": ratio_moment_report({n: results[n] for n in config.sizes}, config.q_list,
                                             config.moment_c_max),
        "mgf": mgf_report(config.disorder_spec, config.beta, config.h, config.k_j, config.mgf_sizes,
                          config.mgf_samples, config.mgf_seed),
        "localization": localization_report({n: results[n] for n in config.sizes},
                                            config.localization_threshold),
    }
    files = {}
    manifest_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, rep in reports.items():
            p = out / f"{name}.csv"
            write_report_csv(p, rep, _DESCRIPTIONS[name])
            files[p.name] = p
        p = out / "replicas.csv"
        write_replicas_csv(p, [r for n in sizes for r in results[n]])
        files[p.name] = p
        if figures:
            from .plotting import render_experiment_figures

            for p in render_experiment_figures(reports, results, config, out):
                files[p.name] = p
        manifest_path = out / "manifest.json"
        manifest = {
            "tool": "metastab",
            "version": __version__,
            "config": config.to_dict(),
            "started": started.isoformat(),
            "finished": datetime.now(timezone.utc).isoformat(),
            "statuses": {k: v.status for k, v in reports.items()},
            "failures": {n: sum(r.failed for r in results[n]) for n in sizes},
            "files": {name: {"sha256": file_digest(p), "bytes": p.stat().st_size}
                      for name, p in sorted(files.items())},
        }
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ExperimentOutcome(reports, results, files, manifest_path)

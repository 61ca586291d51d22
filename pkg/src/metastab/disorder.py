"""
Random coupling arrays for the three example families.

Couplings have the form ``J_ij = A_ij * 1{U_ij <= P_ij}`` with conditionally
independent edges given the environment ``(A_ij, P_ij)``:

* ``erdos_renyi``       A_ij = 1, P_ij = p
* ``inhomogeneous``     A_ij = 1, P_ij = V_i V_j with i.i.d. vertex weights V_i
* ``diluted_hopfield``  A_ij = sum_k xi_i^k xi_j^k, P_ij = p

Random streams
--------------
All randomness comes from numpy's Philox counter-based generator keyed by a
``SeedSequence(master_seed, spawn_key=...)``.  Domain separation:

* ``(0, replica_index)``  edge uniforms; edge ``e`` (row-major upper-triangular
  order) consumes the ``e``-th double of the stream
* ``(1, environment_index)``  vertex weights V_i
* ``(2, environment_index)``  Hopfield patterns

Both the hashing in ``SeedSequence`` and the Philox stream are specified
algorithms, so a given ``(master_seed, replica_index, spec)`` reproduces
bit-identical couplings on every platform.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError

__all__ = [
    "DisorderSpec",
    "RandomSeed",
    "CouplingMatrix",
    "sample_couplings",
    "alpha_n",
    "annealed_couplings",
    "deterministic_couplings",
    "write_couplings",
    "read_couplings",
    "COUPLING_FORMAT_VERSION",
]

KINDS = ("erdos_renyi", "inhomogeneous", "diluted_hopfield")
COUPLING_FORMAT_VERSION = 1


@dataclass(frozen=True)
class DisorderSpec:
    """Law of the coupling array.

    Parameters
    ----------
    kind : str
        One of ``erdos_renyi``, ``inhomogeneous``, ``diluted_hopfield``.
    n_sites : int
        System size N >= 2.
    p : float
        Edge retention probability (``erdos_renyi`` and ``diluted_hopfield``).
    k_j : float
        Uniform bound on |J_ij|.
    weight_law : str
        ``uniform`` (V_i ~ U(weight_low, weight_high)) or ``discrete``
        (V_i drawn from ``weight_values`` with ``weight_probs``).
    n_patterns : int
        Number of Hopfield patterns.
    pattern_law : str
        ``rademacher`` (xi = +-1 fair coin) or ``constant`` (xi = pattern_value).
    """

    kind: str = "erdos_renyi"
    n_sites: int = 2
    p: float = 1.0
    k_j: float = 1.0
    weight_law: str = "uniform"
    weight_low: float = 0.5
    weight_high: float = 0.9
    weight_values: tuple = ()
    weight_probs: tuple = ()
    n_patterns: int = 1
    pattern_law: str = "rademacher"
    pattern_value: float = 1.0

    def __post_init__(self):
        # tuples survive round-trips through json lists
        object.__setattr__(self, "weight_values", tuple(float(v) for v in self.weight_values))
        object.__setattr__(self, "weight_probs", tuple(float(v) for v in self.weight_probs))
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown disorder kind {self.kind!r}; expected one of {KINDS}")
        if int(self.n_sites) != self.n_sites or self.n_sites < 2:
            raise ConfigError(f"n_sites must be an integer >= 2, got {self.n_sites}")
        if not self.k_j > 0:
            raise ConfigError(f"k_j must be positive, got {self.k_j}")
        if self.kind == "erdos_renyi":
            if not 0 < self.p <= 1:
                raise ConfigError(f"erdos_renyi needs p in (0, 1], got {self.p}")
            if self.k_j < 1:
                raise ConfigError("erdos_renyi couplings equal 1, so k_j must be >= 1")
        elif self.kind == "inhomogeneous":
            if self.k_j < 1:
                raise ConfigError("inhomogeneous couplings equal 1, so k_j must be >= 1")
            if self.weight_law == "uniform":
                if not 0 < self.weight_low <= self.weight_high < 1:
                    raise ConfigError("uniform vertex weights need 0 < low <= high < 1")
            elif self.weight_law == "discrete":
                vals, probs = np.asarray(self.weight_values), np.asarray(self.weight_probs)
                if vals.size == 0 or vals.shape != probs.shape:
                    raise ConfigError("discrete vertex weights need matching values and probs")
                if np.any(vals <= 0) or np.any(vals >= 1):
                    raise ConfigError("vertex weights must lie in (0, 1)")
                if np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
                    raise ConfigError("weight_probs must be a probability vector")
            else:
                raise ConfigError(f"unknown weight_law {self.weight_law!r}")
        else:
            if not 0 < self.p <= 1:
                raise ConfigError(f"diluted_hopfield needs p in (0, 1], got {self.p}")
            if self.n_patterns < 1:
                raise ConfigError("n_patterns must be >= 1")
            if self.pattern_law == "rademacher":
                xi_max = 1.0
            elif self.pattern_law == "constant":
                xi_max = abs(self.pattern_value)
                if xi_max > 1:
                    raise ConfigError("pattern entries must lie in [-1, 1]")
            else:
                raise ConfigError(f"unknown pattern_law {self.pattern_law!r}")
            if self.k_j < self.n_patterns * xi_max**2:
                raise ConfigError(
                    f"k_j={self.k_j} < n_patterns * max|xi|^2 = {self.n_patterns * xi_max**2}"
                )

    @property
    def n_edges(self) -> int:
        return self.n_sites * (self.n_sites - 1) // 2

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weight_values"] = list(self.weight_values)
        d["weight_probs"] = list(self.weight_probs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DisorderSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown disorder fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class RandomSeed:
    """Seed of one disorder replica.

    ``environment_index`` selects the stream for the environment draws
    (vertex weights, patterns).  ``None`` ties it to ``replica_index`` so that
    each replica has its own environment; a fixed value conditions every
    replica on the same environment.
    """

    master_seed: int = 0
    replica_index: int = 0
    environment_index: int | None = None

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ConfigError("master_seed must be a 64-bit unsigned integer")
        if self.replica_index < 0:
            raise ConfigError("replica_index must be non-negative")
        if self.environment_index is not None and self.environment_index < 0:
            raise ConfigError("environment_index must be non-negative")

    @property
    def environment(self) -> int:
        return self.replica_index if self.environment_index is None else self.environment_index

    def generator(self, domain: int, index: int) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.master_seed), spawn_key=(domain, index))
        return np.random.Generator(np.random.Philox(ss))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CouplingMatrix:
    """Upper-triangular couplings with their conditional moments.

    ``values``, ``mean`` and ``var`` are flat arrays in row-major
    upper-triangular order, i.e. the order of ``np.triu_indices(n_sites, 1)``.
    """

    n_sites: int
    values: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    k_j: float
    spec: DisorderSpec | None = None
    seed: RandomSeed | None = None
    _sym: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        n_edges = self.n_sites * (self.n_sites - 1) // 2
        for name in ("values", "mean", "var"):
            arr = _readonly(getattr(self, name))
            if arr.shape != (n_edges,):
                raise ConfigError(f"{name} must have shape ({n_edges},), got {arr.shape}")
            object.__setattr__(self, name, arr)
        tol = 1e-12 * self.k_j
        if np.any(np.abs(self.values) > self.k_j + tol) or np.any(np.abs(self.mean) > self.k_j + tol):
            raise ConfigError("couplings exceed the bound k_j")
        if np.any(self.var < 0):
            raise ConfigError("negative conditional variance")
        iu = np.triu_indices(self.n_sites, 1)
        sym = np.zeros((self.n_sites, self.n_sites))
        sym[iu] = self.values
        sym = sym + sym.T
        sym.setflags(write=False)
        object.__setattr__(self, "_sym", sym)

    @property
    def n_edges(self) -> int:
        return self.values.size

    @property
    def is_annealed(self) -> bool:
        return bool(np.all(self.var == 0) and np.array_equal(self.values, self.mean))

    def symmetric(self) -> np.ndarray:
        """Dense symmetric N x N coupling matrix with zero diagonal (read-only)."""
        return self._sym

    def mean_symmetric(self) -> np.ndarray:
        iu = np.triu_indices(self.n_sites, 1)
        m = np.zeros((self.n_sites, self.n_sites))
        m[iu] = self.mean
        return m + m.T

    def __eq__(self, other):
        if not isinstance(other, CouplingMatrix):
            return NotImplemented
        return (
            self.n_sites == other.n_sites
            and self.k_j == other.k_j
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.var, other.var)
        )

    __hash__ = None


def _environment(spec: DisorderSpec, seed: RandomSeed):
    """Return (A, P) edge arrays of the conditioning environment."""
    n = spec.n_sites
    iu, ju = np.triu_indices(n, 1)
    if spec.kind == "erdos_renyi":
        return np.ones(iu.size), np.full(iu.size, float(spec.p))
    if spec.kind == "inhomogeneous":
        rng = seed.generator(1, seed.environment)
        if spec.weight_law == "uniform":
            v = spec.weight_low + (spec.weight_high - spec.weight_low) * rng.random(n)
        else:
            cdf = np.cumsum(spec.weight_probs)
            u = rng.random(n)
            v = np.asarray(spec.weight_values)[np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)]
        return np.ones(iu.size), v[iu] * v[ju]
    rng = seed.generator(2, seed.environment)
    if spec.pattern_law == "rademacher":
        xi = np.where(rng.random((spec.n_patterns, n)) < 0.5, -1.0, 1.0)
    else:
        xi = np.full((spec.n_patterns, n), float(spec.pattern_value))
    a = np.einsum("ki,ki->i", xi[:, iu], xi[:, ju])
    return a, np.full(iu.size, float(spec.p))


def sample_couplings(spec: DisorderSpec, seed: RandomSeed) -> CouplingMatrix:
    """Draw one coupling array ``J_ij = A_ij * 1{U_ij <= P_ij}``.

    The conditional moments are ``mean = A P`` and ``var = A^2 P (1 - P)``.
    """
    spec.validate()
    a, prob = _environment(spec, seed)
    u = seed.generator(0, seed.replica_index).random(spec.n_edges)
    values = np.where(u <= prob, a, 0.0)
    return CouplingMatrix(
        n_sites=spec.n_sites,
        values=values,
        mean=a * prob,
        var=a * a * prob * (1.0 - prob),
        k_j=spec.k_j,
        spec=spec,
        seed=seed,
    )


def deterministic_couplings(n_sites: int, value: float = 1.0, k_j: float | None = None) -> CouplingMatrix:
    """Constant couplings ``J_ij = value`` with zero variance (Curie-Weiss type)."""
    if n_sites < 1:
        raise ConfigError("n_sites must be >= 1")
    k_j = abs(value) if k_j is None else k_j
    if k_j <= 0:
        k_j = 1.0
    n_edges = n_sites * (n_sites - 1) // 2
    vals = np.full(n_edges, float(value))
    return CouplingMatrix(n_sites, vals, vals, np.zeros(n_edges), k_j)


def alpha_n(cm: CouplingMatrix, beta: float) -> float:
    """Disorder-variance functional ``beta^2 / (2 N^2) * sum_{i<j} Var[J_ij]``."""
    return float(beta**2 / (2.0 * cm.n_sites**2) * np.sum(cm.var))


def annealed_couplings(cm: CouplingMatrix) -> CouplingMatrix:
    """Replace every coupling by its conditional mean."""
    return CouplingMatrix(
        n_sites=cm.n_sites,
        values=cm.mean,
        mean=cm.mean,
        var=np.zeros_like(cm.var),
        k_j=cm.k_j,
        spec=cm.spec,
        seed=cm.seed,
    )


def write_couplings(cm: CouplingMatrix, path) -> None:
    """Write the self-describing JSON coupling file.

    Floats are serialized with their shortest round-trip representation,
    so ``read_couplings`` reproduces every value bit-exactly.
    """
    doc = {
        "format_version": COUPLING_FORMAT_VERSION,
        "N": cm.n_sites,
        "k_J": cm.k_j,
        "spec": cm.spec.to_dict() if cm.spec is not None else None,
        "seed": dataclasses.asdict(cm.seed) if cm.seed is not None else None,
        "edges": [[float(j), float(m), float(v)] for j, m, v in zip(cm.values, cm.mean, cm.var)],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_couplings(path) -> CouplingMatrix:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not a coupling file ({exc})") from exc
    if doc.get("format_version") != COUPLING_FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    edges = np.array(doc["edges"], dtype=float).reshape(-1, 3)
    spec = DisorderSpec.from_dict(doc["spec"]) if doc.get("spec") else None
    seed = RandomSeed(**doc["seed"]) if doc.get("seed") else None
    return CouplingMatrix(
        n_sites=int(doc["N"]),
        values=edges[:, 0],
        mean=edges[:, 1],
        var=edges[:, 2],
        k_j=float(doc["k_J"]),
        spec=spec,
        seed=seed,
    )

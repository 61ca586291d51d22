"""
Exact potential theory for the Metropolis chain on the full hypercube.

All quantities are computed from one object, :class:`GlauberNetwork`, which
holds the Gibbs weights and the edge conductances of the chain.  Weights are
kept relative to the ground state (``w(sigma) = exp(-beta (H - H_min))``), and
the conductance of a neighbour pair is

    c(sigma, sigma') = Z mu(sigma) p(sigma, sigma') = exp(-beta max(H, H'))

again shifted by ``H_min``.  Solving the boundary value problems in this
symmetric form gives a positive definite system on the interior, which is
handled with Jacobi-preconditioned conjugate gradients and a sparse LU
fallback.

Conventions
-----------
The capacity is the rate-weighted escape mass

    cap(A, B) = sum_{sigma in A} mu(sigma) (-L h_{A,B})(sigma),

which is the Dirichlet energy of the equilibrium potential.  The last-exit
distribution is proportional to the same summands, which makes the
mean hitting time identity ``E_nu[tau_B] = ||h||_mu / cap`` exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .disorder import CouplingMatrix, annealed_couplings
from .exceptions import CapabilityError, ConfigError, SolverError
from .model import EnergyLandscape, ModelParams, magnetizations, xi_check

__all__ = [
    "StateSet",
    "PotentialSolution",
    "Flow",
    "MetaSpec",
    "GlauberNetwork",
    "MetastabilityCertificate",
    "SandwichReport",
    "equilibrium_potential",
    "capacity",
    "harmonic_sum",
    "last_exit_distribution",
    "mean_hitting_time",
    "dirichlet_energy",
    "thomson_energy",
    "harmonic_flow",
    "dirichlet_eigenvalue",
    "metastability_certificate",
    "metastable_partition",
    "sandwich_check",
    "escape_probabilities",
    "return_escape_probabilities",
]

RESIDUAL_TOL = 1e-10
_CG_RTOL = 1e-14
_DENSE_EIG_LIMIT = 1500
_MASK_LIMIT = 26


class StateSet:
    """Subset of {-1, +1}^N.

    Either an explicit list of configuration indices or a union of
    magnetization levels, given as numbers of up spins ``k`` (magnetization
    ``2k/N - 1``).  Level sets keep a closed form for their size and can be
    used by the lumped chain at any N.
    """

    def __init__(self, n_sites: int, indices=None, levels=None, label: str = ""):
        if (indices is None) == (levels is None):
            raise ConfigError("give exactly one of indices or levels")
        self.n_sites = int(n_sites)
        self.label = label
        self._mask = None
        if levels is not None:
            lv = sorted({int(k) for k in levels})
            if any(k < 0 or k > n_sites for k in lv):
                raise ConfigError(f"levels must lie in 0..{n_sites}")
            self.levels = tuple(lv)
            self.indices = None
        else:
            idx = np.unique(np.asarray(indices, dtype=np.int64))
            if idx.size and (idx[0] < 0 or idx[-1] >= (1 << n_sites)):
                raise ConfigError(f"state indices must lie in [0, 2^{n_sites})")
            idx.setflags(write=False)
            self.indices = idx
            self.levels = None

    @classmethod
    def from_mask(cls, mask, label: str = "") -> "StateSet":
        mask = np.asarray(mask, dtype=bool)
        n = int(round(math.log2(mask.size)))
        if (1 << n) != mask.size:
            raise ConfigError("mask length must be a power of two")
        return cls(n, indices=np.flatnonzero(mask), label=label)

    @classmethod
    def from_magnetization(cls, n_sites: int, values, label: str = "") -> "StateSet":
        """Pre-image of one or more magnetization values on the grid."""
        levels = []
        for m in np.atleast_1d(values):
            k = n_sites * (1.0 + float(m)) / 2.0
            if abs(k - round(k)) > 1e-9:
                raise ConfigError(f"magnetization {m} is not on the grid for N={n_sites}")
            levels.append(int(round(k)))
        return cls(n_sites, levels=levels, label=label)

    @property
    def magnetization_levels(self):
        if self.levels is None:
            return None
        return tuple((2 * k - self.n_sites) / self.n_sites for k in self.levels)

    @property
    def cardinality(self) -> int:
        if self.levels is not None:
            return int(sum(math.comb(self.n_sites, k) for k in self.levels))
        return int(self.indices.size)

    def __len__(self):
        return self.cardinality

    def mask(self) -> np.ndarray:
        if self._mask is None:
            if self.n_sites > _MASK_LIMIT:
                raise CapabilityError(f"cannot materialize a state mask for N={self.n_sites}")
            m = np.zeros(1 << self.n_sites, dtype=bool)
            if self.levels is not None:
                ups = np.rint((magnetizations(self.n_sites) + 1) * self.n_sites / 2).astype(np.int64)
                m[np.isin(ups, self.levels)] = True
            else:
                m[self.indices] = True
            m.setflags(write=False)
            self._mask = m
        return self._mask

    def __contains__(self, index) -> bool:
        index = int(index)
        if self.levels is not None:
            return bin(index).count("1") in self.levels
        return bool(self.indices.size) and bool(np.any(self.indices == index))

    def isdisjoint(self, other: "StateSet") -> bool:
        self._check_same_n(other)
        if self.levels is not None and other.levels is not None:
            return not set(self.levels) & set(other.levels)
        return not np.any(self.mask() & other.mask())

    def union(self, other: "StateSet") -> "StateSet":
        self._check_same_n(other)
        if self.levels is not None and other.levels is not None:
            return StateSet(self.n_sites, levels=self.levels + other.levels)
        return StateSet.from_mask(self.mask() | other.mask())

    def complement(self) -> "StateSet":
        if self.levels is not None:
            rest = [k for k in range(self.n_sites + 1) if k not in self.levels]
            return StateSet(self.n_sites, levels=rest)
        return StateSet.from_mask(~self.mask())

    def _check_same_n(self, other):
        if other.n_sites != self.n_sites:
            raise ConfigError("state sets live on different hypercubes")

    def __eq__(self, other):
        if not isinstance(other, StateSet) or other.n_sites != self.n_sites:
            return NotImplemented
        if self.levels is not None and other.levels is not None:
            return self.levels == other.levels
        return bool(np.array_equal(self.mask(), other.mask()))

    def __hash__(self):
        # equal sets may be stored as levels or as indices, so hash the content
        if self.n_sites <= _MASK_LIMIT:
            return hash((self.n_sites, self.mask().tobytes()))
        return hash((self.n_sites, self.levels))

    def to_dict(self) -> dict:
        if self.levels is not None:
            return {"n_sites": self.n_sites, "levels": list(self.levels), "label": self.label}
        return {"n_sites": self.n_sites, "indices": self.indices.tolist(), "label": self.label}

    def __repr__(self):
        what = f"levels={self.levels}" if self.levels is not None else f"|indices|={self.indices.size}"
        return f"StateSet(N={self.n_sites}, {what}{', ' + self.label if self.label else ''})"


def _union_all(sets) -> StateSet:
    out = sets[0]
    for s in sets[1:]:
        out = out.union(s)
    return out


@dataclass(frozen=True)
class MetaSpec:
    """Ordered metastable sets together with the rate constants.

    ``sets[0]`` is the deepest set.  ``index`` is 1-based: the target pair is
    ``A = sets[index - 1]`` and ``B = union(sets[:index - 1])``.
    """

    sets: tuple
    index: int = 2
    k1: float = 0.1
    k2: float = 0.1
    rho: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "sets", tuple(self.sets))
        if len(self.sets) < 2:
            raise ConfigError("need at least two metastable sets")
        n = self.sets[0].n_sites
        for s in self.sets:
            if s.n_sites != n:
                raise ConfigError("metastable sets live on different hypercubes")
            if s.cardinality == 0:
                raise ConfigError("metastable sets must be non-empty")
        for i in range(len(self.sets)):
            for j in range(i + 1, len(self.sets)):
                if not self.sets[i].isdisjoint(self.sets[j]):
                    raise ConfigError(f"metastable sets {i + 1} and {j + 1} overlap")
        if not 2 <= self.index <= len(self.sets):
            raise ConfigError(f"index must lie in 2..{len(self.sets)}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ConfigError("k1 and k2 must be positive")

    @property
    def n_sites(self) -> int:
        return self.sets[0].n_sites

    @property
    def K(self) -> int:
        return len(self.sets)

    @property
    def target_a(self) -> StateSet:
        return self.sets[self.index - 1]

    @property
    def target_b(self) -> StateSet:
        return _union_all(self.sets[: self.index - 1])

    @property
    def rho_target(self) -> float:
        return self.rho if self.rho is not None else math.exp(-self.k1 * self.n_sites)

    def union(self) -> StateSet:
        return _union_all(self.sets)

    def ordered_by(self, weights) -> "MetaSpec":
        """Return a copy whose sets are sorted by decreasing ``weights``; ties keep order."""
        order = sorted(range(self.K), key=lambda i: -weights[i])
        return MetaSpec(tuple(self.sets[i] for i in order), self.index, self.k1, self.k2, self.rho)


@dataclass
class PotentialSolution:
    """Equilibrium potential of a pair ``(A, B)`` and derived quantities.

    ``log_z_cap`` and ``log_z_harm`` are ``log(Z cap)`` and ``log(Z ||h||_mu)``,
    which stay finite where the capacity itself underflows.
    """

    h: np.ndarray
    cap: float
    harm: float
    nu: np.ndarray
    log_z: float
    log_z_cap: float
    log_z_harm: float
    residual: float
    a_mask: np.ndarray = field(repr=False)
    b_mask: np.ndarray = field(repr=False)

    @property
    def mean_hitting_time(self) -> float:
        """``||h||_mu / cap``, the mean hitting time of B from the last-exit law."""
        return math.exp(self.log_mean_hitting_time)

    @property
    def log_mean_hitting_time(self) -> float:
        return self.log_z_harm - self.log_z_cap

    @property
    def nu_on_a(self) -> np.ndarray:
        return self.nu[self.a_mask]


@dataclass
class Flow:
    """Antisymmetric edge function stored once per undirected edge.

    ``values[e]`` is the flow from ``network.src[e]`` to ``network.dst[e]``;
    the reverse direction is ``-values[e]``, so antisymmetry is exact.
    """

    values: np.ndarray
    network: "GlauberNetwork" = field(repr=False)

    def divergence(self) -> np.ndarray:
        net = self.network
        div = np.zeros(net.n_states)
        np.add.at(div, net.src, self.values)
        np.subtract.at(div, net.dst, self.values)
        return div

    def check_unit(self, a_mask, b_mask, tol: float = 1e-10):
        """Raise if the flow is not a unit flow from A to B."""
        div = self.divergence()
        inner = ~(a_mask | b_mask)
        bal = float(np.max(np.abs(div[inner]))) if inner.any() else 0.0
        if bal > tol:
            raise ConfigError(f"flow is not divergence-free off A and B (max imbalance {bal:.3e})")
        flux = math.fsum(div[a_mask])
        if abs(flux - 1.0) > tol:
            raise ConfigError(f"flow has flux {flux!r} out of A, expected 1")


@dataclass
class MetastabilityCertificate:
    """Bracket of the metastability ratio.

    ``numerator`` is ``K max_j cap(M_j, M \\ M_j) / mu[M_j]``.  The denominator
    (minimum over all sets outside M) lies in ``[lambda0, singleton_min]``.
    """

    numerator: float
    lambda0: float
    singleton_min: float
    eigen_residual: float
    n_singletons: int

    @property
    def ratio_upper(self) -> float:
        return self.numerator / self.lambda0

    @property
    def ratio_lower(self) -> float:
        return self.numerator / self.singleton_min

    def is_certified_below(self, rho: float) -> bool:
        return self.ratio_upper <= rho


@dataclass
class SandwichReport:
    a_n: float
    beta: float
    max_dev: float
    rows: list

    @property
    def ok(self) -> bool:
        return all(r["ok"] for r in self.rows)

    @property
    def violations(self) -> list:
        return [r for r in self.rows if not r["ok"]]


def _as_mask(s, n_states: int) -> np.ndarray:
    if isinstance(s, StateSet):
        m = s.mask()
    else:
        m = np.asarray(s)
        if m.dtype != bool:
            out = np.zeros(n_states, dtype=bool)
            out[m.astype(np.int64)] = True
            m = out
    if m.shape != (n_states,):
        raise ConfigError(f"state set has {m.shape[0]} entries, expected {n_states}")
    return m


def _check_pair(a: np.ndarray, b: np.ndarray):
    if not a.any() or not b.any():
        raise ConfigError("A and B must be non-empty")
    if np.any(a & b):
        raise ConfigError("A and B overlap")


class GlauberNetwork:
    """Electrical-network view of the Metropolis chain of one landscape."""

    def __init__(self, landscape: EnergyLandscape):
        self.landscape = landscape
        n = landscape.n_sites
        self.n_sites = n
        self.n_states = 1 << n
        self.beta = landscape.beta
        e = landscape.energies
        idx = np.arange(self.n_states, dtype=np.int64)
        src, dst, site = [], [], []
        for k in range(n):
            lo = idx[((idx >> k) & 1) == 0]
            src.append(lo)
            dst.append(lo | (1 << k))
            site.append(np.full(lo.size, k, dtype=np.int64))
        self.src = np.concatenate(src) if src else np.zeros(0, np.int64)
        self.dst = np.concatenate(dst) if dst else np.zeros(0, np.int64)
        self.site = np.concatenate(site) if site else np.zeros(0, np.int64)
        self.cond = np.exp(-self.beta * (np.maximum(e[self.src], e[self.dst]) - landscape.e_min))
        self.weights = landscape.weights
        self.laplacian = self._laplacian(self.cond)
        self.degree = self.laplacian.diagonal()
        self.total_rate = self.degree / self.weights

    def _laplacian(self, cond: np.ndarray) -> sp.csr_matrix:
        m = self.n_states
        adj = sp.coo_matrix(
            (np.concatenate([cond, cond]),
             (np.concatenate([self.src, self.dst]), np.concatenate([self.dst, self.src]))),
            shape=(m, m),
        ).tocsr()
        degree = np.asarray(adj.sum(axis=1)).ravel()
        return (sp.diags(degree) - adj).tocsr()

    @classmethod
    def from_couplings(cls, cm: CouplingMatrix, params: ModelParams) -> "GlauberNetwork":
        return cls(EnergyLandscape.from_couplings(cm, params))

    @property
    def log_z(self) -> float:
        return self.landscape.log_z

    @property
    def z_scaled(self) -> float:
        return self.landscape.z_scaled

    @property
    def gibbs(self) -> np.ndarray:
        return self.landscape.gibbs

    def mask(self, s) -> np.ndarray:
        return _as_mask(s, self.n_states)

    def measure(self, s) -> float:
        return self.landscape.measure(self.mask(s))

    def log_z_measure(self, s) -> float:
        return self.landscape.log_measure_times_z(self.mask(s))

    def rate_matrix(self) -> sp.csr_matrix:
        """Generator ``L`` as a sparse matrix (rows sum to zero)."""
        return (sp.diags(1.0 / self.weights) @ (-self.laplacian)).tocsr()

    def _log_scaled(self, x: float) -> float:
        """``log(Z * x / Z_scaled)`` for a sum ``x`` of shifted weights."""
        return -self.beta * self.landscape.e_min + math.log(x) if x > 0 else -math.inf

    # linear algebra

    def solve_interior(self, interior: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        """Solve ``Lw[I, I] x = rhs`` for the conductance Laplacian on ``interior``.

        The target is a componentwise rate-form residual
        ``|rhs - Lw x| / w <= RESIDUAL_TOL * scale``.  CG with iterative
        refinement is tried first, then sparse LU.
        """
        idx = np.flatnonzero(interior)
        if idx.size == 0:
            return np.zeros(0)
        sub = self.laplacian[idx][:, idx].tocsr()
        w = self.weights[idx]
        scale = max(1.0, float(np.max(np.abs(rhs / w))))
        d = sub.diagonal()
        dinv_sqrt = 1.0 / np.sqrt(d)
        sym = (sp.diags(dinv_sqrt) @ sub @ sp.diags(dinv_sqrt)).tocsr()

        def rate_residual(x):
            return float(np.max(np.abs((rhs - sub @ x) / w))) / scale

        x = np.zeros(idx.size)
        for _ in range(4):
            r = rhs - sub @ x
            y, info = spla.cg(sym, r * dinv_sqrt, rtol=_CG_RTOL, atol=0.0, maxiter=20 * idx.size + 1000)
            x = x + y * dinv_sqrt
            if rate_residual(x) <= RESIDUAL_TOL:
                return x
        x = spla.splu(sub.tocsc(), permc_spec="MMD_AT_PLUS_A").solve(rhs)
        for _ in range(2):
            if rate_residual(x) <= RESIDUAL_TOL:
                return x
            x = x + spla.splu(sub.tocsc(), permc_spec="MMD_AT_PLUS_A").solve(rhs - sub @ x)
        res = rate_residual(x)
        if res > RESIDUAL_TOL:
            raise SolverError(f"linear solve stalled at relative rate residual {res:.3e}")
        return x

    def equilibrium_potential(self, a, b) -> np.ndarray:
        a, b = self.mask(a), self.mask(b)
        _check_pair(a, b)
        h = a.astype(float)
        inner = ~(a | b)
        if inner.any():
            # right-hand side: conductance from each interior state into A
            into_a = self.laplacian[inner][:, a]
            rhs = -np.asarray(into_a.sum(axis=1)).ravel()
            h[inner] = np.clip(self.solve_interior(inner, rhs), 0.0, 1.0)
        return h

    def generator_residual(self, h: np.ndarray, a, b) -> float:
        """``max |L h|`` over states outside ``A`` and ``B`` (rate form)."""
        a, b = self.mask(a), self.mask(b)
        inner = ~(a | b)
        if not inner.any():
            return 0.0
        lh = (self.laplacian @ h)[inner] / self.weights[inner]
        return float(np.max(np.abs(lh)))

    def solve(self, a, b) -> PotentialSolution:
        a, b = self.mask(a), self.mask(b)
        h = self.equilibrium_potential(a, b)
        flux = (self.laplacian @ h)[a]  # = w(sigma) (-L h)(sigma) >= 0 on A
        flux = np.maximum(flux, 0.0)
        total = math.fsum(flux)
        if not total > 0:
            raise SolverError("zero capacity: the chain restricted to A and B is reducible")
        nu = np.zeros(self.n_states)
        nu[a] = flux / total
        harm_scaled = math.fsum(self.weights * h)
        zs = self.z_scaled
        return PotentialSolution(
            h=h,
            cap=total / zs,
            harm=harm_scaled / zs,
            nu=nu,
            log_z=self.log_z,
            log_z_cap=self._log_scaled(total),
            log_z_harm=self._log_scaled(harm_scaled),
            residual=self.generator_residual(h, a, b),
            a_mask=a,
            b_mask=b,
        )

    def capacity_dirichlet(self, h: np.ndarray) -> float:
        """Capacity evaluated as the Dirichlet energy of ``h``."""
        return self.dirichlet_energy(h)

    def dirichlet_energy(self, f: np.ndarray, a=None, b=None, tol: float = 1e-12) -> float:
        """``(1/2) sum mu(s) p(s, s') (f(s) - f(s'))^2`` over ordered neighbour pairs."""
        f = np.asarray(f, dtype=float)
        if f.shape != (self.n_states,):
            raise ConfigError(f"function must have {self.n_states} entries")
        if a is not None and np.any(np.abs(f[self.mask(a)] - 1.0) > tol):
            raise ConfigError("function is not 1 on A")
        if b is not None and np.any(np.abs(f[self.mask(b)]) > tol):
            raise ConfigError("function is not 0 on B")
        diff = f[self.src] - f[self.dst]
        return math.fsum(self.cond * diff * diff) / self.z_scaled

    def thomson_energy(self, flow: Flow, a=None, b=None) -> float:
        """``(1/2) sum phi^2 / (mu p)`` over ordered pairs, i.e. once per edge."""
        if a is not None and b is not None:
            flow.check_unit(self.mask(a), self.mask(b))
        v = np.asarray(flow.values, dtype=float)
        return math.fsum(v * v / self.cond) * self.z_scaled

    def harmonic_flow(self, sol: PotentialSolution) -> Flow:
        vals = self.cond / self.z_scaled * (sol.h[self.src] - sol.h[self.dst]) / sol.cap
        return Flow(vals, self)

    def network_flow(self, conductance: np.ndarray, a, b) -> Flow:
        """Unit A-to-B flow of the electrical network with other edge ``conductance``.

        Any positive conductance vector gives an admissible unit flow for the
        Thomson principle; the harmonic flow is the case ``conductance = cond``.
        """
        a, b = self.mask(a), self.mask(b)
        _check_pair(a, b)
        cond = np.asarray(conductance, dtype=float)
        lap = self._laplacian(cond)
        h = a.astype(float)
        inner = ~(a | b)
        if inner.any():
            rhs = -np.asarray(lap[inner][:, a].sum(axis=1)).ravel()
            h[inner] = _cg_solve(lap[inner][:, inner].tocsr(), rhs)
        vals = cond * (h[self.src] - h[self.dst])
        div = np.zeros(self.n_states)
        np.add.at(div, self.src, vals)
        np.subtract.at(div, self.dst, vals)
        return Flow(vals / math.fsum(div[a]), self)

    def escape_probabilities(self, sol: PotentialSolution) -> np.ndarray:
        """Jump-chain ``P_sigma[tau_B < tau_A]`` on A, from one step of ``h``."""
        a = sol.a_mask
        flux = (self.laplacian @ sol.h)[a]
        return np.clip(flux / self.degree[a], 0.0, 1.0)

    def mean_hitting_direct(self, b, start: np.ndarray) -> float:
        """``E_start[tau_B]`` from ``L u = -1`` off B, ``u = 0`` on B."""
        b = self.mask(b)
        u = self.hitting_times(b)
        return math.fsum(np.asarray(start) * u)

    def hitting_times(self, b) -> np.ndarray:
        b = self.mask(b)
        if not b.any():
            raise ConfigError("target set is empty")
        u = np.zeros(self.n_states)
        inner = ~b
        if inner.any():
            u[inner] = self.solve_interior(inner, self.weights[inner])
        return u

    def symmetric_dirichlet_operator(self, m) -> tuple[sp.csr_matrix, np.ndarray]:
        """``W^{-1/2} Lw W^{-1/2}`` on the complement of ``m`` and the index map."""
        m = self.mask(m)
        idx = np.flatnonzero(~m)
        if idx.size == 0:
            raise ConfigError("the absorbing set covers the whole state space")
        s = 1.0 / np.sqrt(self.weights[idx])
        sub = self.laplacian[idx][:, idx]
        return (sp.diags(s) @ sub @ sp.diags(s)).tocsr(), idx

    def dirichlet_eigenvalue(self, m, tol: float = 1e-8):
        """Smallest eigenvalue of ``-L`` killed on ``m`` with its residual.

        The residual is measured in ``l2(mu)``, where the killed generator
        is self-adjoint.
        """
        sym, idx = self.symmetric_dirichlet_operator(m)
        n = idx.size
        if n <= _DENSE_EIG_LIMIT:
            vals, vecs = np.linalg.eigh(sym.toarray())
            lam, v = float(vals[0]), vecs[:, 0]
        else:
            diag = sym.diagonal()
            dinv = 1.0 / diag

            def solve(x):
                y, _ = spla.cg(sym, x, rtol=1e-13, atol=0.0, maxiter=20 * n + 1000,
                               M=spla.LinearOperator((n, n), matvec=lambda z: dinv * z))
                return y

            opinv = spla.LinearOperator((n, n), matvec=solve, dtype=float)
            vals, vecs = spla.eigsh(sym, k=1, sigma=0.0, which="LM", OPinv=opinv, tol=1e-12)
            lam, v = float(vals[0]), vecs[:, 0]
        res = float(np.linalg.norm(sym @ v - lam * v) / np.linalg.norm(v))
        if res > tol * max(1.0, abs(lam)) and res > tol:
            raise SolverError(f"Dirichlet eigenvalue residual {res:.3e} above {tol}")
        return lam, res

    def singleton_ratios(self, m, max_singletons: int | None = None):
        """``cap({s}, M) / mu(s) = 1 / G(s, s)`` for states outside ``M``.

        Uses a dense inverse for small interiors; otherwise solves for the
        ``max_singletons`` states of largest Gibbs weight.
        """
        sym, idx = self.symmetric_dirichlet_operator(m)
        n = idx.size
        if n <= _DENSE_EIG_LIMIT or (max_singletons is not None and max_singletons >= n and n <= 4096):
            g = np.diag(np.linalg.inv(sym.toarray()))
            return idx, 1.0 / g
        count = min(n, max_singletons or 256)
        pick = np.argsort(-self.weights[idx], kind="stable")[:count]
        w = self.weights[idx]
        out = np.empty(count)
        sub = self.laplacian[idx][:, idx].tocsr()
        for j, p in enumerate(pick):
            e = np.zeros(n)
            e[p] = 1.0
            # G(s, s) = (Lw^{-1})_{ss} w(s)
            out[j] = 1.0 / (_cg_solve(sub, e)[p] * w[p])
        return idx[pick], out


def _cg_solve(mat: sp.csr_matrix, rhs: np.ndarray) -> np.ndarray:
    d = mat.diagonal()
    s = 1.0 / np.sqrt(d)
    sym = (sp.diags(s) @ mat @ sp.diags(s)).tocsr()
    y, info = spla.cg(sym, rhs * s, rtol=_CG_RTOL, atol=0.0, maxiter=20 * rhs.size + 1000)
    if info > 0:
        y = spla.splu(sym.tocsc(), permc_spec="MMD_AT_PLUS_A").solve(rhs * s)
    return y * s


# functional interface


def _network(cm: CouplingMatrix, params: ModelParams) -> GlauberNetwork:
    params.require_enumerable()
    return GlauberNetwork.from_couplings(cm, params)


def equilibrium_potential(cm: CouplingMatrix, params: ModelParams, a, b) -> np.ndarray:
    """``h_{A,B}``: harmonic off A and B, 1 on A, 0 on B."""
    return _network(cm, params).equilibrium_potential(a, b)


def capacity(cm: CouplingMatrix, params: ModelParams, a, b) -> float:
    return _network(cm, params).solve(a, b).cap


def harmonic_sum(cm: CouplingMatrix, params: ModelParams, a, b) -> float:
    """``||h_{A,B}||_{l1(mu)}``."""
    return _network(cm, params).solve(a, b).harm


def last_exit_distribution(cm: CouplingMatrix, params: ModelParams, a, b) -> np.ndarray:
    """Last-exit biased distribution on A, as a full state-indexed vector."""
    return _network(cm, params).solve(a, b).nu


def mean_hitting_time(cm: CouplingMatrix, params: ModelParams, a, b) -> tuple[float, float]:
    """Mean hitting time of B from the last-exit law, by two routes.

    Returns ``(via_identity, via_direct)`` where the first is
    ``||h||_mu / cap`` and the second averages the solution of
    ``L u = -1`` off B under the last-exit law.
    """
    net = _network(cm, params)
    sol = net.solve(a, b)
    return sol.mean_hitting_time, net.mean_hitting_direct(b, sol.nu)


def dirichlet_energy(cm: CouplingMatrix, params: ModelParams, f, a=None, b=None) -> float:
    return _network(cm, params).dirichlet_energy(f, a, b)


def thomson_energy(cm: CouplingMatrix, params: ModelParams, flow: Flow, a=None, b=None) -> float:
    return flow.network.thomson_energy(flow, a, b)


def harmonic_flow(cm: CouplingMatrix, params: ModelParams, a, b) -> Flow:
    net = _network(cm, params)
    return net.harmonic_flow(net.solve(a, b))


def dirichlet_eigenvalue(cm: CouplingMatrix, params: ModelParams, m) -> float:
    return _network(cm, params).dirichlet_eigenvalue(m)[0]


def escape_probabilities(cm: CouplingMatrix, params: ModelParams, a, b) -> np.ndarray:
    net = _network(cm, params)
    return net.escape_probabilities(net.solve(a, b))


def return_escape_probabilities(net: GlauberNetwork, a, b) -> np.ndarray:
    """``P_sigma[tau_B < tau_A]`` on A where a move inside A is not a return.

    Here the chain must first leave A; ``tau_A`` is the first entrance into A
    after that.  Solved as a linear system over A from ``h_{A,B}``.
    """
    a, b = net.mask(a), net.mask(b)
    _check_pair(a, b)
    h = net.equilibrium_potential(a, b)
    ia = np.flatnonzero(a)
    pos = -np.ones(net.n_states, dtype=np.int64)
    pos[ia] = np.arange(ia.size)
    n = ia.size
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    for k in range(net.n_sites):
        nb = ia ^ (1 << k)
        lo = np.minimum(ia, nb)
        hi = np.maximum(ia, nb)
        # edge index of (lo, hi) in the network arrays: block k, position of lo among bit-k-clear states
        e = net.cond[_edge_index(lo, k, net.n_sites)]
        prob = e / net.degree[ia]
        in_a = a[nb]
        in_b = b[nb]
        rhs += np.where(in_b, prob, 0.0)
        other = ~in_a & ~in_b
        rhs += np.where(other, prob * (1.0 - h[nb]), 0.0)
        rows.append(np.arange(n)[in_a])
        cols.append(pos[nb[in_a]])
        vals.append(prob[in_a])
    p_aa = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    g = spla.spsolve((sp.identity(n) - p_aa).tocsc(), rhs)
    return np.atleast_1d(g)


def _edge_index(lo: np.ndarray, k: int, n_sites: int) -> np.ndarray:
    """Position in the network edge arrays of the edge ``(lo, lo | 1<<k)``."""
    block = k * (1 << (n_sites - 1))
    # rank of lo among indices with bit k clear: drop bit k
    low = lo & ((1 << k) - 1)
    high = lo >> (k + 1)
    return block + (high << k) + low


def metastability_certificate(cm: CouplingMatrix, params: ModelParams, ms: MetaSpec,
                              max_singletons: int | None = None,
                              net: GlauberNetwork | None = None) -> MetastabilityCertificate:
    """Bracket the metastability ratio of the sets in ``ms``.

    The numerator is exact.  For the denominator, every ``X`` outside ``M``
    satisfies ``cap(X, M) / mu[X] >= lambda0`` (Dirichlet eigenvalue on the
    complement of ``M``), and singletons give an upper bound.
    """
    net = net or _network(cm, params)
    union = ms.union().mask()
    worst = 0.0
    for j, mj in enumerate(ms.sets):
        a = mj.mask()
        b = union & ~a
        sol = net.solve(a, b)
        worst = max(worst, sol.cap / net.measure(a))
    lam, res = net.dirichlet_eigenvalue(union)
    _, ratios = net.singleton_ratios(union, max_singletons)
    return MetastabilityCertificate(
        numerator=ms.K * worst,
        lambda0=lam,
        singleton_min=float(np.min(ratios)),
        eigen_residual=res,
        n_singletons=int(ratios.size),
    )


def metastable_partition(cm_annealed: CouplingMatrix, params: ModelParams, ms: MetaSpec,
                         tie_tol: float = 1e-12, net: GlauberNetwork | None = None) -> np.ndarray:
    """Valley index (0-based) of every configuration under the given chain.

    Each state goes to the set it is most likely to reach first; near-ties
    (within ``tie_tol``) go to the lowest index.
    """
    net = net or _network(cm_annealed, params)
    union = ms.union().mask()
    probs = np.empty((ms.K, net.n_states))
    for j, mj in enumerate(ms.sets):
        a = mj.mask()
        probs[j] = net.equilibrium_potential(a, union & ~a)
    best = probs.max(axis=0)
    return np.argmax(probs >= best - tie_tol, axis=0)


def sandwich_check(cm: CouplingMatrix, params: ModelParams, a_n: float, pairs=(), sets=(),
                   rtol: float = 1e-12) -> SandwichReport:
    """Compare quenched and annealed capacities, measures and escape probabilities.

    On the event ``max |H - H~| < a_N``:

    * ``Z cap / (Z~ cap~)`` lies in ``[exp(-beta a_N), exp(beta a_N)]``
    * ``Z mu[X] / (Z~ mu~[X])`` lies in the same interval
    * ``cap / mu[X]`` over its annealed value lies in ``exp(+-2 beta a_N)``

    ``rtol`` absorbs floating-point rounding at the interval ends.
    """
    in_event, max_dev = xi_check(cm, params, a_n)
    if not in_event:
        raise ConfigError(f"a_N={a_n} does not exceed max |H - H~| = {max_dev}")
    q = _network(cm, params)
    an = _network(annealed_couplings(cm), params)
    ba = params.beta * a_n
    slack = math.log1p(rtol)
    rows = []

    def row(kind, label, log_ratio, width):
        rows.append({"kind": kind, "set": label, "log_ratio": log_ratio, "bound": width,
                     "ok": abs(log_ratio) <= width + slack})

    for a, b in pairs:
        sq, sa = q.solve(a, b), an.solve(a, b)
        label = f"{_label(a)}|{_label(b)}"
        row("capacity", label, sq.log_z_cap - sa.log_z_cap, ba)
        row("escape", label,
            (sq.log_z_cap - q.log_z_measure(a)) - (sa.log_z_cap - an.log_z_measure(a)), 2 * ba)
    for x in sets:
        row("measure", _label(x), q.log_z_measure(x) - an.log_z_measure(x), ba)
    return SandwichReport(a_n=a_n, beta=params.beta, max_dev=max_dev, rows=rows)


def _label(s) -> str:
    if isinstance(s, StateSet):
        return s.label or repr(s)
    return f"<{int(np.count_nonzero(s))} states>"

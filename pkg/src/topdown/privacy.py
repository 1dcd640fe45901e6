"""Discrete Gaussian sampling and zCDP budget accounting.

The sampler follows the rejection construction from a discrete Laplace proposal
with Bernoulli(exp(-gamma)) primitives built from uniform integer draws only, so
no floating-point value ever touches the noise. All budget shares are
``fractions.Fraction`` and every allocation check is exact.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from types import MappingProxyType
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

if TYPE_CHECKING:
    from .schema import QueryGroup, Schema
    from .spine import GeoNode, Spine


class AllocationError(ValueError):
    """An allocation table violates the share-sum premises of the budget theorem."""


class AuditFailure(AssertionError):
    """A neighboring pair whose privacy loss exceeds the accounted budget."""


def as_fraction(value) -> Fraction:
    """Exact rational from ints, Fractions or strings like ``"519/1024"`` or ``"2.56"``."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, str):
        return Fraction(value.strip())
    if isinstance(value, float):
        # floats go through their shortest repr so 0.1 means 1/10
        return Fraction(repr(value))
    return Fraction(value)


# random bits ---------------------------------------------------------------------


def substream(master_seed: int, *keys: str) -> np.random.Generator:
    """Independent generator keyed by ``keys`` (e.g. node id and group name)."""
    digest = hashlib.sha256("\x1f".join(keys).encode()).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(master_seed), spawn_key=words)))


def _uniform(rng: np.random.Generator, n: int) -> int:
    """Uniform integer in ``[0, n)`` for arbitrarily large ``n``."""
    if n < 2**62:
        return int(rng.integers(0, n))
    nbytes = (n.bit_length() + 7) // 8 + 1
    limit = (256**nbytes // n) * n
    while True:
        v = int.from_bytes(rng.bytes(nbytes), "little")
        if v < limit:
            return v % n


# scalar exact sampler ------------------------------------------------------------


def _bernoulli_exp01(rng, num: int, den: int, k: int = 1) -> bool:
    """Bernoulli(exp(-num/den)) for ``0 <= num <= den``."""
    while _uniform(rng, den * k) < num:
        k += 1
    return k % 2 == 1


def _bernoulli_exp(rng, num: int, den: int) -> bool:
    """Bernoulli(exp(-num/den)) for any ``num/den >= 0``."""
    whole, frac = divmod(num, den)
    for _ in range(whole):
        if not _bernoulli_exp01(rng, 1, 1):
            return False
    return _bernoulli_exp01(rng, frac, den)


def _discrete_laplace(rng, t: int) -> int:
    """Two-sided geometric with P(x) proportional to exp(-|x|/t)."""
    while True:
        u = _uniform(rng, t)
        if not _bernoulli_exp(rng, u, t):
            continue
        v = 0
        while _bernoulli_exp01(rng, 1, 1):
            v += 1
        x = u + t * v
        negative = _uniform(rng, 2) == 1
        if negative and x == 0:
            continue
        return -x if negative else x


def _dg_scalar(rng, p: int, q: int) -> int:
    t = math.isqrt(p // q) + 1
    den = 2 * p * q * t * t
    while True:
        y = _discrete_laplace(rng, t)
        if _bernoulli_exp(rng, (abs(y) * t * q - p) ** 2, den):
            return y


# vectorized exact sampler --------------------------------------------------------

_MAX_DEN = 2**52
# below this many draws the per-call array overhead outweighs vectorization
_SCALAR_BELOW = 16


def _bern_exp01_vec(rng, num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """Elementwise Bernoulli(exp(-num/den)), ``0 <= num <= den < 2**52``."""
    n = num.shape[0]
    out = np.zeros(n, dtype=bool)
    k = np.ones(n, dtype=np.int64)
    alive = np.arange(n)
    while alive.size:
        kk = k[alive]
        if np.any(kk >= 2**10):
            # astronomically rare; finish those elements with unbounded integers
            big = alive[kk >= 2**10]
            for i in big:
                out[i] = _bernoulli_exp01(rng, int(num[i]), int(den[i]), int(k[i]))
            alive = alive[kk < 2**10]
            continue
        hit = rng.integers(0, den[alive] * kk) < num[alive]
        done = alive[~hit]
        out[done] = k[done] % 2 == 1
        alive = alive[hit]
        k[alive] += 1
    return out


def _bern_exp_vec(rng, whole: np.ndarray, frac: np.ndarray, den: np.ndarray) -> np.ndarray:
    """Elementwise Bernoulli(exp(-(whole + frac/den)))."""
    ok = np.ones(whole.shape[0], dtype=bool)
    remaining = whole.copy()
    idx = np.flatnonzero(remaining > 0)
    while idx.size:
        draws = _bern_exp01_vec(rng, np.ones(idx.size, np.int64), np.ones(idx.size, np.int64))
        ok[idx[~draws]] = False
        remaining[idx] -= 1
        idx = idx[draws & (remaining[idx] > 0)]
    live = np.flatnonzero(ok)
    if live.size:
        ok[live] = _bern_exp01_vec(rng, frac[live], den[live])
    return ok


def _discrete_laplace_vec(rng, t: int, n: int) -> np.ndarray:
    out = np.empty(n, dtype=np.int64)
    todo = np.arange(n)
    ones = None
    while todo.size:
        m = todo.size
        u = rng.integers(0, t, size=m)
        tt = np.full(m, t, dtype=np.int64)
        keep = _bern_exp01_vec(rng, u, tt)
        sel = todo[keep]
        u = u[keep]
        v = np.zeros(sel.size, dtype=np.int64)
        going = np.arange(sel.size)
        while going.size:
            ones = np.ones(going.size, dtype=np.int64)
            step = _bern_exp01_vec(rng, ones, ones)
            going = going[step]
            v[going] += 1
        x = u + t * v
        neg = rng.integers(0, 2, size=sel.size) == 1
        valid = ~(neg & (x == 0))
        out[sel[valid]] = np.where(neg[valid], -x[valid], x[valid])
        todo = np.concatenate([todo[~keep], sel[~valid]])
        todo.sort()
    return out


def _dg_vector(rng, p: int, q: int, n: int) -> np.ndarray:
    t = math.isqrt(p // q) + 1
    den = 2 * p * q * t * t
    out = np.empty(n, dtype=np.int64)
    todo = np.arange(n)
    while todo.size:
        y = _discrete_laplace_vec(rng, t, todo.size)
        # exact numerator (|y| t q - p)^2 in unbounded integers, then split against den
        a = np.abs(y).astype(object) * (t * q) - p
        num = a * a
        whole = np.array([int(v) // den for v in num], dtype=np.int64)
        frac = np.array([int(v) % den for v in num], dtype=np.int64)
        accept = _bern_exp_vec(rng, whole, frac, np.full(todo.size, den, dtype=np.int64))
        out[todo[accept]] = y[accept]
        todo = todo[~accept]
    return out


def sample_discrete_gaussian(sigma2, rng: np.random.Generator, size: int | None = None):
    """Exact draw(s) from the discrete Gaussian N_Z(0, sigma2).

    ``sigma2`` is interpreted as an exact rational. With ``size`` given, returns an
    int64 array; large-denominator parameters fall back to the unbounded-integer path.
    """
    s2 = as_fraction(sigma2)
    if s2 <= 0:
        raise ValueError(f"sigma2 must be positive, got {s2}")
    p, q = s2.numerator, s2.denominator
    if size is None:
        return _dg_scalar(rng, p, q)
    t = math.isqrt(p // q) + 1
    if size > _SCALAR_BELOW and 2 * p * q * t * t < _MAX_DEN:
        return _dg_vector(rng, p, q, int(size))
    return np.array([_dg_scalar(rng, p, q) for _ in range(int(size))], dtype=np.int64)


# distribution functions ----------------------------------------------------------


def _support_radius(s2: float, moment: int = 0) -> int:
    # tail sum of y^m exp(-y^2/2s2) beyond K is far below 1e-15 of the mass
    return int(math.ceil(math.sqrt(2 * s2 * (36 * math.log(10) + moment * max(1.0, math.log(s2 + 1)))))) + 2


def _tail_bound(s2: float, k: int, moment: int) -> float:
    # for y > K >= sqrt(m s2), y^m exp(-y^2/2s2) is decreasing, bound by integral plus first term
    first = (k + 1) ** moment * math.exp(-((k + 1) ** 2) / (2 * s2))
    return 2 * first * (1 + s2 / (k + 1))


def _normalizer(s2: float) -> tuple[float, float]:
    k = _support_radius(s2)
    y = np.arange(-k, k + 1, dtype=float)
    z = math.fsum(np.exp(-(y * y) / (2 * s2)))
    return z, _tail_bound(s2, k, 0)


def pmf(x: int, sigma2) -> float:
    """P(X = x) for X ~ N_Z(0, sigma2), normalizer truncated with tail error below 1e-12."""
    s2 = float(as_fraction(sigma2))
    if s2 <= 0:
        raise ValueError("sigma2 must be positive")
    z, tail = _normalizer(s2)
    assert tail / z < 1e-12
    return math.exp(-(x * x) / (2 * s2)) / z


def variance_of(sigma2) -> float:
    """Exact (to truncation error) variance of N_Z(0, sigma2); never exceeds sigma2."""
    s2 = float(as_fraction(sigma2))
    if s2 <= 0:
        raise ValueError("sigma2 must be positive")
    k = _support_radius(s2, moment=2)
    y = np.arange(-k, k + 1, dtype=float)
    w = np.exp(-(y * y) / (2 * s2))
    z = math.fsum(w)
    assert _tail_bound(s2, k, 2) / z < 1e-12
    # the true value is strictly below s2; rounding can land a hair above it
    return min(math.fsum(y * y * w) / z, s2)


# allocation ---------------------------------------------------------------------


def _freeze_shares(m: Mapping) -> Mapping:
    return MappingProxyType({k: as_fraction(v) for k, v in m.items()})


def _freeze_nested(m: Mapping) -> Mapping:
    return MappingProxyType({k: _freeze_shares(v) for k, v in m.items()})


@dataclass(frozen=True)
class AllocationTable:
    """Per-level geographic shares ``c``, per-query shares ``d`` and the global scale.

    ``psi_squared`` is stored instead of psi since psi is usually irrational
    (rho = 2.56 gives psi^2 = 25/64, but rho = 1.095 has no rational square root).
    Node overrides take precedence over level entries and are produced by spine
    transformations.
    """

    psi_squared: Fraction
    level_shares: Mapping[str, Fraction]
    query_shares_by_level: Mapping[str, Mapping[str, Fraction]]
    node_shares: Mapping[str, Fraction] = field(default_factory=dict)
    node_query_shares: Mapping[str, Mapping[str, Fraction]] = field(default_factory=dict)

    def __post_init__(self):
        psi2 = as_fraction(self.psi_squared)
        if psi2 <= 0:
            raise AllocationError("psi^2 must be positive")
        object.__setattr__(self, "psi_squared", psi2)
        object.__setattr__(self, "level_shares", _freeze_shares(self.level_shares))
        object.__setattr__(self, "query_shares_by_level", _freeze_nested(self.query_shares_by_level))
        object.__setattr__(self, "node_shares", _freeze_shares(self.node_shares))
        object.__setattr__(self, "node_query_shares", _freeze_nested(self.node_query_shares))
        for where, shares in [("level", self.level_shares), ("node", self.node_shares)]:
            for k, v in shares.items():
                if v < 0 or v > 1:
                    raise AllocationError(f"{where} share for {k!r} is {v}, outside [0, 1]")
        for src in (self.query_shares_by_level, self.node_query_shares):
            for k, d in src.items():
                for g, v in d.items():
                    if v < 0 or v > 1:
                        raise AllocationError(f"query share {g!r} at {k!r} is {v}, outside [0, 1]")

    @classmethod
    def from_rho(cls, rho, level_shares, query_shares, **kw) -> "AllocationTable":
        return cls(1 / as_fraction(rho), level_shares, query_shares, **kw)

    @property
    def rho(self) -> Fraction:
        return 1 / self.psi_squared

    def node_share(self, node: "GeoNode") -> Fraction:
        if node.id in self.node_shares:
            return self.node_shares[node.id]
        try:
            return self.level_shares[node.level_name]
        except KeyError:
            raise AllocationError(f"no share for level {node.level_name!r} (node {node.id!r})") from None

    def query_shares(self, node: "GeoNode") -> dict[str, Fraction]:
        if node.id in self.node_query_shares:
            d = self.node_query_shares[node.id]
        else:
            d = self.query_shares_by_level.get(node.level_name, {})
        return {g: v for g, v in d.items() if v > 0}

    def sigma2(self, node: "GeoNode", group: str) -> Fraction:
        c = self.node_share(node)
        d = self.query_shares(node).get(group, Fraction(0))
        if c == 0 or d == 0:
            raise AllocationError(f"group {group!r} is not measured at node {node.id!r}")
        return self.psi_squared / (c * d)

    def with_node_overrides(self, shares, query_shares, keep=None) -> "AllocationTable":
        ns = {k: v for k, v in self.node_shares.items() if keep is None or k in keep}
        nq = {k: v for k, v in self.node_query_shares.items() if keep is None or k in keep}
        ns.update(shares)
        nq.update(query_shares)
        return AllocationTable(self.psi_squared, self.level_shares, self.query_shares_by_level, ns, nq)

    def with_rho(self, rho) -> "AllocationTable":
        return AllocationTable(1 / as_fraction(rho), self.level_shares, self.query_shares_by_level,
                               self.node_shares, self.node_query_shares)


def total_rho(alloc: AllocationTable, spine: "Spine | None" = None) -> Fraction:
    """Validate the allocation exactly and return rho = 1/psi^2.

    Without a spine every leaf path is assumed to visit each configured level once.
    """
    def check_d(label: str, d: Mapping[str, Fraction]):
        s = sum(d.values(), Fraction(0))
        if s != 1:
            raise AllocationError(f"query shares at {label} sum to {s}, not 1")

    if spine is None:
        for level, c in alloc.level_shares.items():
            if c > 0:
                check_d(f"level {level!r}", alloc.query_shares_by_level.get(level, {}))
        s = sum(alloc.level_shares.values(), Fraction(0))
        if s != 1:
            raise AllocationError(f"level shares sum to {s}, not 1")
        return alloc.rho

    seen_levels = set()
    for node in spine.iter_nodes():
        c = alloc.node_share(node)
        if c == 0:
            continue
        if node.id in alloc.node_query_shares:
            check_d(f"node {node.id!r}", alloc.node_query_shares[node.id])
        elif node.level_name not in seen_levels:
            seen_levels.add(node.level_name)
            check_d(f"level {node.level_name!r}", alloc.query_shares_by_level.get(node.level_name, {}))
    for leaf in spine.leaves():
        s = sum((alloc.node_share(spine[n]) for n in spine.path(leaf)), Fraction(0))
        if s != 1:
            raise AllocationError(f"shares on the path to leaf {leaf!r} sum to {s}, not 1")
    return alloc.rho


def epsilon_of_rho(rho, delta: float) -> float:
    """(epsilon, delta)-DP implied by rho-zCDP: eps = rho + 2 sqrt(rho ln(1/delta))."""
    r = float(rho)
    if r <= 0:
        raise ValueError("rho must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return r + 2 * math.sqrt(r * math.log(1 / delta))


def privacy_report(alloc: AllocationTable, spine: "Spine | None" = None,
                   deltas: Sequence[float] = (1e-10,)) -> str:
    rho = total_rho(alloc, spine)
    lines = [
        f"rho        {rho}  ({float(rho):.6g})",
        f"psi^2      {alloc.psi_squared}  (psi = {math.sqrt(alloc.psi_squared):.6g})",
        "",
        f"{'level':<16}{'share':>14}{'value':>12}",
    ]
    for level, c in alloc.level_shares.items():
        lines.append(f"{level:<16}{str(c):>14}{float(c):>12.6f}")
    for node, c in alloc.node_shares.items():
        lines.append(f"{'node ' + node:<16}{str(c):>14}{float(c):>12.6f}")
    lines += ["", f"{'delta':<16}{'epsilon':>12}"]
    for d in deltas:
        lines.append(f"{d:<16.3g}{epsilon_of_rho(rho, d):>12.4f}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class NoisyMeasurement:
    node: str
    group: str
    values: np.ndarray
    sigma2: Fraction

    @property
    def weight(self) -> float:
        """Solver weight 1/sigma^2 (the distribution parameter, not the exact variance)."""
        return float(1 / self.sigma2)


# audit --------------------------------------------------------------------------


@dataclass(frozen=True)
class AuditReport:
    max_loss: Fraction
    bound: Fraction
    witness: tuple
    pairs_checked: int

    @property
    def tight(self) -> bool:
        return self.max_loss == self.bound


def _row_of_cells(q: "QueryGroup") -> np.ndarray:
    m = q.matrix.tocsc()
    rows = np.full(m.shape[1], -1, dtype=np.int64)
    for j in range(m.shape[1]):
        if m.indptr[j + 1] > m.indptr[j]:
            rows[j] = m.indices[m.indptr[j]]
    return rows


def sensitivity_audit(groups: "Mapping[str, QueryGroup]", alloc: AllocationTable,
                      spine: "Spine", schema: "Schema") -> AuditReport:
    """Brute-force privacy loss over every bounded-neighbor move of one record.

    A record moves from (leaf a, cell u) to (leaf b, cell v). Every node on either
    path sees its histogram change by e_v - e_u (both paths), -e_u or +e_v, and
    the loss (1/psi^2) sum c d |Q delta|^2 must not exceed 2 rho.
    """
    groups = getattr(groups, "groups", groups)
    rho = total_rho(alloc, spine)
    bound = 2 * rho
    leaves = spine.leaves()
    if len(leaves) > 6 or schema.size > 12:
        raise ValueError("sensitivity audit is limited to 6 leaves and 12 cells")
    rows = {name: _row_of_cells(q) for name, q in groups.items()}
    weights: dict[str, list[tuple[str, Fraction]]] = {}
    for node in spine.iter_nodes():
        c = alloc.node_share(node)
        weights[node.id] = [(g, c * d) for g, d in alloc.query_shares(node).items()] if c > 0 else []
        for g, _ in weights[node.id]:
            if g not in rows:
                raise AllocationError(f"no query group named {g!r}")
    paths = {l: set(spine.path(l)) for l in leaves}

    best, witness, count = Fraction(-1), (), 0
    cells = range(schema.size)
    for a in leaves:
        for b in leaves:
            both = paths[a] & paths[b]
            for u in cells:
                for v in cells:
                    if a == b and u == v:
                        continue
                    count += 1
                    loss = Fraction(0)
                    for nid in paths[a] | paths[b]:
                        for g, w in weights[nid]:
                            r = rows[g]
                            if nid in both:
                                sq = 0 if r[u] == r[v] else (2 if r[u] >= 0 and r[v] >= 0 else 1)
                            elif nid in paths[a]:
                                sq = 1 if r[u] >= 0 else 0
                            else:
                                sq = 1 if r[v] >= 0 else 0
                            loss += w * sq
                    loss *= rho
                    if loss > best:
                        best, witness = loss, (a, u, b, v)
    report = AuditReport(max(best, Fraction(0)), bound, witness, count)
    if best > bound:
        raise AuditFailure(f"privacy loss {best} exceeds {bound} for move {witness}")
    return report


__all__ = [
    "AllocationError", "AllocationTable", "AuditFailure", "AuditReport", "NoisyMeasurement",
    "as_fraction", "epsilon_of_rho", "pmf", "privacy_report", "sample_discrete_gaussian",
    "sensitivity_audit", "substream", "total_rho", "variance_of",
]

"""Invariant, structural-zero and aggregation constraint systems.

All inequalities are stored as upper bounds, so a lower bound ``a x >= k`` is the
row ``-a x <= -k``. Systems are built either over one node's cells or over the
stacked cells of a parent's children (child-major, ``c*`` cells per child).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import sparse

from .schema import Schema
from .spine import GeoNode, Spine


class ConstraintError(ValueError):
    pass


class InputInconsistency(ConstraintError):
    """The confidential data violates a constraint built from its own invariants."""


@dataclass(frozen=True)
class InvariantSpec:
    """Which statistics are held invariant.

    ``state_level`` names the geographic level whose totals are exact (nodes above
    it inherit exact totals as sums). ``gq_attribute`` is the schema attribute
    holding GQ types; ``gq_types`` lists its levels that are GQ types (default:
    every level but the first, which is the household level). ``householder`` is
    the cell predicate counted against housing units.
    """

    state_total: bool = False
    state_level: str | None = None
    housing_unit_count: bool = False
    occupied_gq: bool = False
    gq_attribute: str | None = None
    gq_types: tuple[str, ...] | None = None
    householder: Mapping[str, tuple[str, ...]] | None = None

    def resolved_gq_types(self, schema: Schema) -> tuple[str, ...]:
        if self.gq_attribute is None:
            raise ConstraintError("occupied_gq invariant requires gq_attribute")
        attr = schema.attribute(self.gq_attribute)
        types = self.gq_types if self.gq_types is not None else attr.levels[1:]
        for t in types:
            attr.index(t)
        return tuple(types)

    def resolved_state_level(self, spine: Spine) -> str:
        if self.state_level is not None:
            return self.state_level
        if len(spine.level_names) < 2:
            raise ConstraintError("spine has no state level")
        return spine.level_names[1]


@dataclass(frozen=True)
class StructuralZeroSet:
    """Forbidden cells, each predicate a mapping ``attribute -> labels`` (a conjunction)."""

    predicates: tuple[Mapping[str, tuple[str, ...]], ...] = ()

    def mask(self, schema: Schema) -> np.ndarray:
        out = np.zeros(schema.size, dtype=bool)
        for p in self.predicates:
            out |= schema.cell_mask(p)
        return out


@dataclass(frozen=True)
class ConstraintSet:
    n: int
    eq_matrix: sparse.csr_matrix
    eq_rhs: np.ndarray
    ub_matrix: sparse.csr_matrix
    ub_rhs: np.ndarray
    eq_labels: tuple[str, ...] = ()
    ub_labels: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("eq", "ub"):
            m = sparse.csr_matrix(getattr(self, f"{name}_matrix"), dtype=float)
            rhs = np.asarray(getattr(self, f"{name}_rhs"), dtype=float).reshape(-1)
            if m.shape[1] != self.n or m.shape[0] != rhs.shape[0]:
                raise ConstraintError(f"{name} block has shape {m.shape} for n={self.n}, rhs {rhs.shape}")
            labels = tuple(getattr(self, f"{name}_labels")) or tuple(f"{name}[{i}]" for i in range(m.shape[0]))
            object.__setattr__(self, f"{name}_matrix", m)
            object.__setattr__(self, f"{name}_rhs", rhs)
            object.__setattr__(self, f"{name}_labels", labels)

    @classmethod
    def empty(cls, n: int) -> "ConstraintSet":
        z = sparse.csr_matrix((0, n))
        return cls(n, z, np.zeros(0), z, np.zeros(0))

    @property
    def n_eq(self) -> int:
        return self.eq_matrix.shape[0]

    @property
    def n_ub(self) -> int:
        return self.ub_matrix.shape[0]

    def __len__(self) -> int:
        return self.n_eq + self.n_ub

    def combine(self, *others: "ConstraintSet") -> "ConstraintSet":
        sets = (self,) + others
        if any(s.n != self.n for s in sets):
            raise ConstraintError("cannot combine constraint sets over different variable spaces")
        return ConstraintSet(
            self.n,
            sparse.vstack([s.eq_matrix for s in sets], format="csr"),
            np.concatenate([s.eq_rhs for s in sets]),
            sparse.vstack([s.ub_matrix for s in sets], format="csr"),
            np.concatenate([s.ub_rhs for s in sets]),
            sum((s.eq_labels for s in sets), ()),
            sum((s.ub_labels for s in sets), ()),
        )

    def embed(self, offset: int, n: int) -> "ConstraintSet":
        """Same rows over a larger space where this block's variables start at ``offset``."""
        def shift(m):
            coo = m.tocoo()
            return sparse.csr_matrix((coo.data, (coo.row, coo.col + offset)), shape=(m.shape[0], n))
        return ConstraintSet(n, shift(self.eq_matrix), self.eq_rhs, shift(self.ub_matrix),
                             self.ub_rhs, self.eq_labels, self.ub_labels)


class _Rows:
    """Accumulates labelled rows before freezing them into a ConstraintSet."""

    def __init__(self, n: int):
        self.n = n
        self.eq: list[tuple[np.ndarray, float, str]] = []
        self.ub: list[tuple[np.ndarray, float, str]] = []

    def add_eq(self, coeffs, rhs, label):
        self.eq.append((np.asarray(coeffs, dtype=float), float(rhs), label))

    def add_ub(self, coeffs, rhs, label):
        self.ub.append((np.asarray(coeffs, dtype=float), float(rhs), label))

    def freeze(self) -> ConstraintSet:
        def block(rows):
            if not rows:
                return sparse.csr_matrix((0, self.n)), np.zeros(0), ()
            m = sparse.csr_matrix(np.vstack([r[0] for r in rows]))
            return m, np.array([r[1] for r in rows]), tuple(r[2] for r in rows)
        em, er, el = block(self.eq)
        um, ur, ul = block(self.ub)
        return ConstraintSet(self.n, em, er, um, ur, el, ul)


def _node_rows(node: GeoNode, schema: Schema, inv: InvariantSpec, zeros: StructuralZeroSet,
               total: int | None) -> ConstraintSet:
    """Rows that hold for one node's own histogram."""
    rows = _Rows(schema.size)
    ones = np.ones(schema.size)
    if total is not None:
        rows.add_eq(ones, total, f"{node.id}: total = {total}")
    if inv.housing_unit_count:
        rows.add_eq(ones, node.housing_units, f"{node.id}: units = {node.housing_units}")
    if inv.occupied_gq:
        for t in inv.resolved_gq_types(schema):
            mask = schema.cell_mask({inv.gq_attribute: [t]}).astype(float)
            k = node.occupied_gq.get(t, 0)
            if k > 0:
                rows.add_ub(-mask, -k, f"{node.id}: gq[{t}] >= {k}")
            else:
                rows.add_eq(mask, 0, f"{node.id}: gq[{t}] = 0 (no facility)")
    if inv.householder is not None:
        mask = schema.cell_mask(inv.householder).astype(float)
        rows.add_ub(mask, node.housing_units, f"{node.id}: householders <= {node.housing_units}")
    for cell in np.flatnonzero(zeros.mask(schema)):
        e = np.zeros(schema.size)
        e[cell] = 1
        rows.add_eq(e, 0, f"{node.id}: structural zero cell {cell}")
    return rows.freeze()


def invariant_key(node: GeoNode) -> str:
    """Invariant totals of split state-equivalents bind on the original state."""
    return node.origin or node.id


def invariant_totals(spine: Spine, leaf_totals: Mapping[str, int], inv: InvariantSpec) -> dict[str, int]:
    """Exact totals for every node at or above the state level, keyed by invariant_key."""
    if not inv.state_total:
        return {}
    level = inv.resolved_state_level(spine)
    depth = spine.level_names.index(level)
    out: dict[str, int] = {}
    for node in spine.iter_nodes():
        if node.level <= depth:
            key = node.id if node.level < depth else invariant_key(node)
            out[key] = out.get(key, 0) + sum(int(leaf_totals.get(l, 0)) for l in spine.leaves(node.id))
    return out


def build_root_constraints(root: GeoNode, schema: Schema, inv: InvariantSpec = InvariantSpec(),
                           zeros: StructuralZeroSet = StructuralZeroSet(),
                           totals: Mapping[str, int] | None = None,
                           level_names: Sequence[str] | None = None) -> ConstraintSet:
    total = None
    if inv.state_total and totals is not None:
        total = totals.get(root.id)
    return _node_rows(root, schema, inv, zeros, total)


def build_children_constraints(parent_solution, children: Sequence[GeoNode], schema: Schema,
                               inv: InvariantSpec = InvariantSpec(),
                               zeros: StructuralZeroSet = StructuralZeroSet(),
                               totals: Mapping[str, int] | None = None,
                               level_names: Sequence[str] | None = None,
                               parent: GeoNode | None = None) -> ConstraintSet:
    """Per-child rows, state-equivalent group totals and ``sum_children x = parent``."""
    x_parent = np.asarray(parent_solution)
    cstar = schema.size
    if x_parent.shape != (cstar,):
        raise ConstraintError(f"parent solution has shape {x_parent.shape}, expected ({cstar},)")
    if np.any(x_parent < 0) or np.any(x_parent != np.round(x_parent)):
        raise ConstraintError("parent solution must be a non-negative integer vector")
    if parent is not None:
        hu = sum(c.housing_units for c in children)
        if hu != parent.housing_units:
            raise ConstraintError(
                f"children of {parent.id!r} hold {hu} housing units, parent holds {parent.housing_units}"
            )
        for t in set(parent.occupied_gq) | {t for c in children for t in c.occupied_gq}:
            s = sum(c.occupied_gq.get(t, 0) for c in children)
            if s != parent.occupied_gq.get(t, 0):
                raise ConstraintError(f"children of {parent.id!r} hold {s} GQs of type {t!r}, parent differs")

    n = cstar * len(children)
    totals = totals or {}
    group_members: dict[str, list[int]] = {}
    depth = None
    if inv.state_total and level_names is not None:
        depth = list(level_names).index(inv.state_level or level_names[1])
    blocks = []
    for i, child in enumerate(children):
        own = None
        if depth is not None:
            if child.level < depth:
                own = totals.get(child.id)
            elif child.level == depth:
                key = invariant_key(child)
                if child.origin is None:
                    own = totals.get(key)
                elif key in totals:
                    group_members.setdefault(key, []).append(i)
        blocks.append(_node_rows(child, schema, inv, zeros, own).embed(i * cstar, n))

    rows = _Rows(n)
    for key, members in group_members.items():
        coeffs = np.zeros(n)
        for i in members:
            coeffs[i * cstar:(i + 1) * cstar] = 1
        rows.add_eq(coeffs, totals[key], f"{key}: state total = {totals[key]}")
    agg = sparse.hstack([sparse.identity(cstar, format="csr")] * len(children), format="csr")
    labels = tuple(f"aggregate cell {j}" for j in range(cstar))
    agg_set = ConstraintSet(n, agg, x_parent.astype(float), sparse.csr_matrix((0, n)), np.zeros(0), labels, ())
    out = agg_set
    for b in blocks:
        out = out.combine(b)
    return out.combine(rows.freeze())


def violations(x, cs: ConstraintSet, tol: float = 0.0) -> list[str]:
    x = np.asarray(x, dtype=float)
    if x.shape != (cs.n,):
        raise ConstraintError(f"vector of length {x.shape} for a system over {cs.n} variables")
    out = []
    if cs.n_eq:
        r = cs.eq_matrix @ x - cs.eq_rhs
        out += [f"{cs.eq_labels[i]} (residual {r[i]:g})" for i in np.flatnonzero(np.abs(r) > tol)]
    if cs.n_ub:
        r = cs.ub_matrix @ x - cs.ub_rhs
        out += [f"{cs.ub_labels[i]} (excess {r[i]:g})" for i in np.flatnonzero(r > tol)]
    return out


def check_feasible(x, cs: ConstraintSet, tol: float = 0.0) -> bool:
    return not violations(x, cs, tol)


def verify_confidential(x, cs: ConstraintSet) -> None:
    bad = violations(x, cs, 0.0)
    if bad:
        raise InputInconsistency(f"confidential data violates {len(bad)} constraint(s), first: {bad[0]}")


def _bareiss_det(a: list[list[int]]) -> int:
    """Exact integer determinant by fraction-free elimination."""
    m = [row[:] for row in a]
    n = len(m)
    sign, prev = 1, 1
    for k in range(n - 1):
        if m[k][k] == 0:
            for i in range(k + 1, n):
                if m[i][k] != 0:
                    m[k], m[i] = m[i], m[k]
                    sign = -sign
                    break
            else:
                return 0
        for i in range(k + 1, n):
            for j in range(k + 1, n):
                m[i][j] = (m[i][j] * m[k][k] - m[i][k] * m[k][j]) // prev
        prev = m[k][k]
    return sign * m[n - 1][n - 1]


def tum_check(m, max_dim: int = 8) -> bool:
    """True iff every square submatrix has determinant in {-1, 0, 1}."""
    a = np.asarray(m.toarray() if sparse.issparse(m) else m)
    if a.ndim != 2:
        raise ConstraintError("tum_check expects a matrix")
    if max(a.shape) > max_dim:
        raise ConstraintError(f"tum_check is exponential; matrix {a.shape} exceeds {max_dim}x{max_dim}")
    if np.any(a != np.round(a)):
        return False
    a = a.astype(int).tolist()
    r, c = len(a), len(a[0]) if a else 0
    for k in range(1, min(r, c) + 1):
        for rows in itertools.combinations(range(r), k):
            for cols in itertools.combinations(range(c), k):
                if abs(_bareiss_det([[a[i][j] for j in cols] for i in rows])) > 1:
                    return False
    return True

"""Attribute schemas, flattened histograms and marginal query groups.

Cells are flattened row-major over the declared attribute order, so the last
attribute varies fastest. Geography is never part of the schema vector; each
geographic node carries its own length-``c*`` histogram.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse


class SchemaError(ValueError):
    """Raised for malformed schemas, recodes or histograms."""


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    levels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels:
            raise SchemaError(f"attribute {self.name!r} has no levels")
        if len(set(self.levels)) != len(self.levels):
            raise SchemaError(f"attribute {self.name!r} has duplicate level labels")

    def __len__(self) -> int:
        return len(self.levels)

    def index(self, label: str) -> int:
        try:
            return self.levels.index(label)
        except ValueError:
            raise SchemaError(f"{label!r} is not a level of {self.name!r}") from None


@dataclass(frozen=True)
class Schema:
    attributes: tuple[AttributeSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate attribute names")

    @classmethod
    def from_levels(cls, spec: Mapping[str, Sequence[str]]) -> "Schema":
        return cls(tuple(AttributeSpec(k, tuple(v)) for k, v in spec.items()))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(a) for a in self.attributes)

    @property
    def size(self) -> int:
        """Cardinality ``c*`` of the sample space without geography."""
        return math.prod(self.shape)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    def attribute(self, name: str) -> AttributeSpec:
        for a in self.attributes:
            if a.name == name:
                return a
        raise SchemaError(f"unknown attribute {name!r}")

    def position(self, name: str) -> int:
        for i, a in enumerate(self.attributes):
            if a.name == name:
                return i
        raise SchemaError(f"unknown attribute {name!r}")

    def flatten_index(self, indices: Sequence[int]) -> int:
        if len(indices) != len(self.attributes):
            raise SchemaError(
                f"expected {len(self.attributes)} level indices, got {len(indices)}"
            )
        cell = 0
        for idx, attr in zip(indices, self.attributes):
            if not 0 <= idx < len(attr):
                raise IndexError(f"level index {idx} out of range for {attr.name!r}")
            cell = cell * len(attr) + idx
        return cell

    def unflatten_index(self, cell: int) -> tuple[int, ...]:
        if not 0 <= cell < self.size:
            raise IndexError(f"cell {cell} out of range [0, {self.size})")
        out = []
        for attr in reversed(self.attributes):
            cell, r = divmod(cell, len(attr))
            out.append(r)
        return tuple(reversed(out))

    def cell_of_labels(self, labels: Sequence[str]) -> int:
        return self.flatten_index([a.index(l) for a, l in zip(self.attributes, labels)])

    def labels_of_cell(self, cell: int) -> tuple[str, ...]:
        return tuple(
            a.levels[i] for a, i in zip(self.attributes, self.unflatten_index(cell))
        )

    def cell_mask(self, predicate: Mapping[str, Iterable[str]]) -> np.ndarray:
        """Boolean mask of cells whose levels match every ``attr -> labels`` entry."""
        mask = np.ones(self.shape, dtype=bool)
        for name, labels in predicate.items():
            pos = self.position(name)
            attr = self.attributes[pos]
            keep = np.zeros(len(attr), dtype=bool)
            for label in labels:
                keep[attr.index(label)] = True
            view = [1] * len(self.attributes)
            view[pos] = len(attr)
            mask &= keep.reshape(view)
        return mask.reshape(-1)


@dataclass(frozen=True)
class Histogram:
    schema: Schema
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.shape != (self.schema.size,):
            raise SchemaError(
                f"histogram length {counts.shape} does not match c*={self.schema.size}"
            )
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(counts == np.round(counts)):
                raise SchemaError("histogram counts must be integers")
        counts = counts.astype(np.int64)
        if np.any(counts < 0):
            raise SchemaError("histogram counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def zeros(cls, schema: Schema) -> "Histogram":
        return cls(schema, np.zeros(schema.size, dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class Recode:
    """Collapse of one attribute's levels into disjoint (possibly partial) groups."""

    attribute: str
    groups: tuple[frozenset[int], ...]
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        groups = tuple(frozenset(g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        seen: set[int] = set()
        for g in groups:
            if not g:
                raise SchemaError(f"recode of {self.attribute!r} has an empty group")
            if seen & g:
                raise SchemaError(
                    f"recode of {self.attribute!r} has overlapping groups {sorted(seen & g)}"
                )
            seen |= g
        if self.labels and len(self.labels) != len(groups):
            raise SchemaError("recode labels must match groups")

    @classmethod
    def identity(cls, attr: AttributeSpec) -> "Recode":
        return cls(attr.name, tuple(frozenset([i]) for i in range(len(attr))), attr.levels)

    @classmethod
    def from_labels(cls, attr: AttributeSpec, groups: Sequence[Sequence[str]]) -> "Recode":
        return cls(
            attr.name,
            tuple(frozenset(attr.index(l) for l in g) for g in groups),
            tuple("+".join(g) for g in groups),
        )

    def matrix(self, attr: AttributeSpec) -> sparse.csr_matrix:
        rows, cols = [], []
        for r, g in enumerate(self.groups):
            for c in sorted(g):
                if not 0 <= c < len(attr):
                    raise SchemaError(f"recode index {c} out of range for {attr.name!r}")
                rows.append(r)
                cols.append(c)
        data = np.ones(len(rows), dtype=np.int64)
        return sparse.csr_matrix((data, (rows, cols)), shape=(len(self.groups), len(attr)))

    def is_exhaustive(self, attr: AttributeSpec) -> bool:
        return set().union(*self.groups) == set(range(len(attr)))

    def is_identity(self, attr: AttributeSpec) -> bool:
        return len(self.groups) == len(attr) and all(len(g) == 1 for g in self.groups)


QUERY_KINDS = ("marginal", "total", "detailed")


@dataclass(frozen=True, eq=False)
class QueryGroup:
    name: str
    matrix: sparse.csr_matrix
    kind: str = "marginal"
    exhaustive: bool = True
    row_labels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in QUERY_KINDS:
            raise SchemaError(f"unknown query kind {self.kind!r}")
        m = sparse.csr_matrix(self.matrix, dtype=np.int64)
        m.sum_duplicates()
        m.eliminate_zeros()
        if m.nnz and not np.all(m.data == 1):
            raise SchemaError(f"query group {self.name!r} must be binary")
        per_col = np.asarray(m.sum(axis=0)).ravel()
        if np.any(per_col > 1):
            raise SchemaError(f"query group {self.name!r} has a column with two ones")
        object.__setattr__(self, "matrix", m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def build_marginal(
    schema: Schema, recodes: Sequence[Recode] = (), name: str | None = None
) -> QueryGroup:
    """Marginal query group as the Kronecker product of per-attribute recodes.

    Attributes without a recode are summed out. No recodes gives the TOTAL query;
    identity recodes on every attribute give the DETAILED query.
    """
    by_attr: dict[str, Recode] = {}
    for r in recodes:
        if r.attribute in by_attr:
            raise SchemaError(f"more than one recode for {r.attribute!r}")
        schema.attribute(r.attribute)
        by_attr[r.attribute] = r

    factors = []
    labels: list[tuple[str, ...]] = [()]
    exhaustive = True
    for attr in schema.attributes:
        rec = by_attr.get(attr.name)
        if rec is None:
            factors.append(sparse.csr_matrix(np.ones((1, len(attr)), dtype=np.int64)))
            continue
        factors.append(rec.matrix(attr))
        exhaustive &= rec.is_exhaustive(attr)
        rec_labels = rec.labels or tuple(str(i) for i in range(len(rec.groups)))
        labels = [l + (x,) for l in labels for x in rec_labels]

    matrix = factors[0]
    for f in factors[1:]:
        matrix = sparse.kron(matrix, f, format="csr")

    if not by_attr:
        kind = "total"
    elif len(by_attr) == len(schema.attributes) and all(
        by_attr[a.name].is_identity(a) for a in schema.attributes
    ):
        kind = "detailed"
    else:
        kind = "marginal"
    if name is None:
        name = {"total": "TOTAL", "detailed": "DETAILED"}.get(kind) or "x".join(
            a.name.upper() for a in schema.attributes if a.name in by_attr
        )
    row_labels = tuple("/".join(l) if l else "total" for l in labels)
    return QueryGroup(name, sparse.csr_matrix(matrix), kind, exhaustive, row_labels)


def total_query(schema: Schema) -> QueryGroup:
    return build_marginal(schema, (), "TOTAL")


def detailed_query(schema: Schema) -> QueryGroup:
    return build_marginal(schema, [Recode.identity(a) for a in schema.attributes], "DETAILED")


def evaluate(q: QueryGroup | sparse.spmatrix | np.ndarray, x) -> np.ndarray:
    """Exact ``Q x`` over integers."""
    matrix = q.matrix if isinstance(q, QueryGroup) else q
    counts = x.counts if isinstance(x, Histogram) else np.asarray(x)
    if matrix.shape[1] != counts.shape[0]:
        raise SchemaError(
            f"dimension mismatch: query has {matrix.shape[1]} columns, "
            f"histogram has {counts.shape[0]} cells"
        )
    return np.asarray(matrix @ counts).ravel()


def stack(groups: Sequence[QueryGroup]) -> sparse.csr_matrix:
    return sparse.vstack([g.matrix for g in groups], format="csr")


def group_l2_sensitivity(q: QueryGroup) -> float:
    """L2 sensitivity under bounded neighbors (one record moved between cells).

    Moving a record from cell ``a`` to cell ``b`` changes the answers by
    ``Q[:, b] - Q[:, a]``, so only the set of distinct column patterns matters.
    """
    m = q.matrix.tocsc()
    # each column holds at most one 1, so a pattern is either empty or one row
    rows_hit = {int(m.indices[m.indptr[j]]) for j in range(m.shape[1]) if m.indptr[j + 1] > m.indptr[j]}
    has_empty = bool(np.any(np.diff(m.indptr) == 0))
    if len(rows_hit) >= 2:
        return math.sqrt(2)
    if rows_hit and has_empty:
        return 1.0
    return 0.0

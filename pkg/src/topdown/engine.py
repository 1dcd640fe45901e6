"""Measurement and top-down estimation over the spine, plus the block-by-block baseline."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy import sparse

from .constraints import (
    ConstraintSet,
    InvariantSpec,
    StructuralZeroSet,
    _node_rows,
    build_children_constraints,
    build_root_constraints,
    invariant_key,
    invariant_totals,
    verify_confidential,
    violations,
)
from .privacy import AllocationTable, NoisyMeasurement, sample_discrete_gaussian, substream, total_rho
from .schema import QueryGroup, Schema, detailed_query, total_query
from .solvers import LeastSquaresProblem, PriorBlock, SolverError, nnls_solve, round_solve, solve_tolerance
from .spine import GeoNode, Spine

log = logging.getLogger(__name__)

TAU_MARGIN = 1e-6


class EngineError(RuntimeError):
    pass


class ValidationError(EngineError):
    pass


@dataclass(frozen=True)
class QueryStrategy:
    """Query-group registry plus optional per-level pass schedules.

    Which groups a node measures is read from the allocation (positive query
    share). A schedule lists group names per pass; groups a node does not
    measure are dropped from its L2 passes and empty passes are skipped. Without
    an explicit schedule, root and leaf nodes use a single pass and every other
    node estimates TOTAL first and the remaining groups second.
    """

    groups: Mapping[str, QueryGroup]
    l2_passes: Mapping[str, tuple[tuple[str, ...], ...]] = field(default_factory=dict)
    rounder_passes: Mapping[str, tuple[tuple[str, ...], ...]] = field(default_factory=dict)

    @classmethod
    def from_groups(cls, schema: Schema, groups: Sequence[QueryGroup], **kw) -> "QueryStrategy":
        reg = {"TOTAL": total_query(schema), "DETAILED": detailed_query(schema)}
        for g in groups:
            reg[g.name] = g
        return cls(reg, **kw)

    def group(self, name: str) -> QueryGroup:
        try:
            return self.groups[name]
        except KeyError:
            raise EngineError(f"query group {name!r} is not defined") from None

    def measured(self, node: GeoNode, alloc: AllocationTable) -> list[str]:
        if alloc.node_share(node) == 0:
            return []
        names = list(alloc.query_shares(node))
        for n in names:
            self.group(n)
        return names

    def _default(self, node: GeoNode, names: list[str]) -> list[list[str]]:
        if node.parent is None or node.is_leaf or "TOTAL" not in names:
            return [names]
        return [["TOTAL"], [n for n in names if n != "TOTAL"]]

    def l2_schedule(self, node: GeoNode, alloc: AllocationTable) -> list[list[str]]:
        names = self.measured(node, alloc)
        if node.level_name in self.l2_passes:
            passes = [[g for g in p if g in names] for p in self.l2_passes[node.level_name]]
            leftover = [g for g in names if not any(g in p for p in passes)]
            if leftover:
                passes.append(leftover)
        else:
            passes = self._default(node, names)
        return [p for p in passes if p]

    def rounder_schedule(self, node: GeoNode, alloc: AllocationTable) -> list[list[str]]:
        if node.level_name in self.rounder_passes:
            passes = [list(p) for p in self.rounder_passes[node.level_name]]
            for p in passes:
                for g in p:
                    self.group(g)
            return [p for p in passes if p] or [[]]
        return self.l2_schedule(node, alloc) or [[]]


MeasurementSet = dict  # (node id, group name) -> NoisyMeasurement


@dataclass(frozen=True)
class MdfOutput:
    schema: Schema
    spine: Spine
    solutions: Mapping[str, np.ndarray]
    timings: Mapping[str, float] = field(default_factory=dict)

    def leaf(self, node_id: str) -> np.ndarray:
        return self.solutions[node_id]

    def tabulate(self, node_id: str) -> np.ndarray:
        """Histogram of ``node_id`` recomputed from leaf solutions."""
        return sum((self.solutions[l] for l in self.spine.leaves(node_id)),
                   np.zeros(self.schema.size, dtype=np.int64))


def aggregate(spine: Spine, leaf_hists: Mapping[str, np.ndarray], size: int) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for node in reversed(spine.iter_nodes()):
        if node.is_leaf:
            if node.id not in leaf_hists:
                raise EngineError(f"missing histogram for leaf {node.id!r}")
            h = np.asarray(leaf_hists[node.id], dtype=np.int64)
            if h.shape != (size,):
                raise EngineError(f"histogram for {node.id!r} has shape {h.shape}, expected ({size},)")
            out[node.id] = h
        else:
            out[node.id] = sum((out[c] for c in node.children), np.zeros(size, dtype=np.int64))
    return out


def measure_spine(spine: Spine, schema: Schema, strategy: QueryStrategy, alloc: AllocationTable,
                  hists: Mapping[str, np.ndarray], seed: int, workers: int = 1) -> MeasurementSet:
    """Noisy answers M~ = Q x + y for every node and every group it measures."""
    total_rho(alloc, spine)
    tasks = []
    for node in spine.iter_nodes():
        for g in strategy.measured(node, alloc):
            if node.id not in hists:
                raise EngineError(f"missing histogram for node {node.id!r}")
            tasks.append((node, g))

    def measure(task):
        node, g = task
        q = strategy.group(g)
        s2 = alloc.sigma2(node, g)
        rng = substream(seed, node.id, g)
        noise = sample_discrete_gaussian(s2, rng, q.rows)
        values = np.asarray(q.matrix @ hists[node.id], dtype=np.int64) + noise
        return (node.id, g), NoisyMeasurement(node.id, g, values, s2)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return dict(pool.map(measure, tasks))
    return dict(map(measure, tasks))


def _block_diag(blocks: Sequence[sparse.spmatrix], widths: Sequence[int]) -> sparse.csr_matrix:
    parts = []
    n = sum(widths)
    offset = 0
    for b, w in zip(blocks, widths):
        b = sparse.coo_matrix(b)
        parts.append(sparse.csr_matrix((b.data, (b.row, b.col + offset)), shape=(b.shape[0], n)))
        offset += w
    return sparse.vstack(parts, format="csr") if parts else sparse.csr_matrix((0, n))


def _estimate(nodes: Sequence[GeoNode], schema: Schema, strategy: QueryStrategy, alloc: AllocationTable,
              measurements: MeasurementSet, cs: ConstraintSet) -> np.ndarray:
    """Multi-pass L2 then multi-pass rounding for a stacked set of sibling nodes."""
    cstar = schema.size
    widths = [cstar] * len(nodes)
    l2 = [strategy.l2_schedule(n, alloc) for n in nodes]
    n_pass = max((len(s) for s in l2), default=0)

    x_tilde = None
    prior: list[PriorBlock] = []
    tau = 0.0
    for k in range(n_pass):
        mats, weights, targets = [], [], []
        for node, sched in zip(nodes, l2):
            names = sched[k] if k < len(sched) else []
            rows = [strategy.group(g).matrix for g in names]
            mats.append(sparse.vstack(rows) if rows else sparse.csr_matrix((0, cstar)))
            for g in names:
                m = measurements[(node.id, g)]
                weights.append(np.full(m.values.size, m.weight))
                targets.append(m.values.astype(float))
        Q = _block_diag(mats, widths)
        if Q.shape[0] == 0:
            continue
        problem = LeastSquaresProblem(Q, np.concatenate(weights), np.concatenate(targets), cs, prior,
                                      tau + TAU_MARGIN if prior else 0.0)
        x_tilde = nnls_solve(problem).x
        if k < n_pass - 1:
            prior.append(PriorBlock(Q, Q @ x_tilde))
            tau = solve_tolerance(cs, prior)
    if x_tilde is None:
        # nothing measured: any feasible point anchors the rounder
        x_tilde = nnls_solve(LeastSquaresProblem(sparse.csr_matrix((0, cs.n)), [], [], cs)).x

    base = [strategy.group("TOTAL").matrix if "TOTAL" in strategy.groups else total_query(schema).matrix,
            strategy.group("DETAILED").matrix if "DETAILED" in strategy.groups else detailed_query(schema).matrix]
    rsched = [strategy.rounder_schedule(n, alloc) for n in nodes]
    r_pass = max(len(s) for s in rsched)
    prior_eq = []
    x_hat = None
    for k in range(r_pass):
        obj_blocks, con_blocks = [], []
        for sched in rsched:
            names = sched[k] if k < len(sched) else []
            rows = [strategy.group(g).matrix for g in names]
            obj_blocks.append(sparse.vstack(rows + base))
            con_blocks.append(sparse.vstack(rows) if rows else sparse.csr_matrix((0, cstar)))
        objective = _block_diag(obj_blocks, widths)
        sol = round_solve(x_tilde, cs, objective, prior_eq)
        x_hat = sol.x
        B = _block_diag(con_blocks, widths)
        if B.shape[0]:
            prior_eq.append((B, B @ x_hat))
    return x_hat


def _context(node_ids, err: Exception) -> EngineError:
    return EngineError(f"estimation failed at {', '.join(node_ids)}: {err}")


def topdown_run(spine: Spine, schema: Schema, strategy: QueryStrategy, alloc: AllocationTable,
                cef: Mapping[str, np.ndarray], seed: int, invariants: InvariantSpec = InvariantSpec(),
                zeros: StructuralZeroSet = StructuralZeroSet(), workers: int = 1,
                measurements: MeasurementSet | None = None) -> tuple[MdfOutput, MeasurementSet]:
    """Measure every node, then solve the root and each parent's children in turn."""
    total_rho(alloc, spine)
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    hists = aggregate(spine, cef, schema.size)
    leaf_totals = {l: int(hists[l].sum()) for l in spine.leaves()}
    totals = invariant_totals(spine, leaf_totals, invariants)
    if measurements is None:
        measurements = measure_spine(spine, schema, strategy, alloc, hists, seed, workers)
    timings["measure"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    root = spine.root_node
    cs = build_root_constraints(root, schema, invariants, zeros, totals, spine.level_names)
    verify_confidential(hists[root.id], cs)
    try:
        solutions = {root.id: _estimate([root], schema, strategy, alloc, measurements, cs)}
    except (SolverError, ValueError) as e:
        raise _context([root.id], e) from e

    def solve_children(parent_id: str):
        parent = spine[parent_id]
        kids = [spine[c] for c in parent.children]
        ccs = build_children_constraints(solutions[parent_id], kids, schema, invariants, zeros, totals,
                                         spine.level_names, parent)
        verify_confidential(np.concatenate([hists[k.id] for k in kids]), _confidential_view(ccs, hists, parent_id))
        try:
            x = _estimate(kids, schema, strategy, alloc, measurements, ccs)
        except (SolverError, ValueError) as e:
            raise _context([parent_id], e) from e
        return {k.id: x[i * schema.size:(i + 1) * schema.size] for i, k in enumerate(kids)}

    wave = [root.id] if not root.is_leaf else []
    while wave:
        if workers > 1 and len(wave) > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(solve_children, wave))
        else:
            results = [solve_children(p) for p in wave]
        for r in results:
            solutions.update(r)
        wave = [c for p in wave for c in spine[p].children if not spine[c].is_leaf]
    timings["estimate"] = time.perf_counter() - t0
    return MdfOutput(schema, spine, solutions, timings), measurements


def _confidential_view(ccs: ConstraintSet, hists, parent_id) -> ConstraintSet:
    """Children rows checked against the confidential data: aggregation targets the true parent."""
    n_agg = hists[parent_id].size
    rhs = ccs.eq_rhs.copy()
    rhs[:n_agg] = hists[parent_id]
    return ConstraintSet(ccs.n, ccs.eq_matrix, rhs, ccs.ub_matrix, ccs.ub_rhs, ccs.eq_labels, ccs.ub_labels)


def block_by_block_run(spine: Spine, schema: Schema, strategy: QueryStrategy, alloc: AllocationTable,
                       cef: Mapping[str, np.ndarray], seed: int, invariants: InvariantSpec = InvariantSpec(),
                       zeros: StructuralZeroSet = StructuralZeroSet(), workers: int = 1,
                       measurements: MeasurementSet | None = None) -> tuple[MdfOutput, MeasurementSet]:
    """Independent leaf-level estimates with the whole budget at the leaves; upper levels are sums.

    Leaf query shares are taken from the allocation's leaf entries; state totals
    cannot be imposed since no node above the leaves is solved. Supplied
    ``measurements`` are used instead of fresh ones.
    """
    hists = aggregate(spine, cef, schema.size)
    leaf_level = {spine[l].level_name for l in spine.leaves()}
    leaf_alloc = AllocationTable(
        alloc.psi_squared,
        {lv: Fraction(1) if lv in leaf_level else Fraction(0) for lv in spine.level_names},
        alloc.query_shares_by_level,
    )
    local = InvariantSpec(False, None, invariants.housing_unit_count, invariants.occupied_gq,
                          invariants.gq_attribute, invariants.gq_types, invariants.householder)
    collected: MeasurementSet = {}
    solutions = {}

    def run_leaf(leaf_id: str):
        node = spine[leaf_id]
        q = {}
        for g in leaf_alloc.query_shares(node):
            if measurements is not None:
                q[(node.id, g)] = measurements[(node.id, g)]
                continue
            grp = strategy.group(g)
            s2 = leaf_alloc.sigma2(node, g)
            noise = sample_discrete_gaussian(s2, substream(seed, node.id, g), grp.rows)
            q[(node.id, g)] = NoisyMeasurement(node.id, g, np.asarray(grp.matrix @ hists[leaf_id]) + noise, s2)
        cs = _node_rows(node, schema, local, zeros, None)
        verify_confidential(hists[leaf_id], cs)
        try:
            x = _estimate([node], schema, strategy, leaf_alloc, q, cs)
        except (SolverError, ValueError) as e:
            raise _context([leaf_id], e) from e
        return leaf_id, x, q

    leaves = spine.leaves()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run_leaf, leaves))
    else:
        results = [run_leaf(l) for l in leaves]
    for leaf_id, x, q in results:
        solutions[leaf_id] = x
        collected.update(q)
    solutions.update({k: v for k, v in aggregate(spine, solutions, schema.size).items() if k not in solutions})
    return MdfOutput(schema, spine, solutions), collected


def validate(out: MdfOutput, invariants: InvariantSpec = InvariantSpec(),
             zeros: StructuralZeroSet = StructuralZeroSet(),
             cef: Mapping[str, np.ndarray] | None = None) -> list[str]:
    """Postconditions checked before anything is written; returns problems found."""
    spine, schema = out.spine, out.schema
    problems = []
    for node in spine.iter_nodes():
        x = out.solutions.get(node.id)
        if x is None:
            problems.append(f"{node.id}: no solution")
            continue
        x = np.asarray(x)
        if not np.issubdtype(x.dtype, np.integer):
            problems.append(f"{node.id}: non-integer solution")
        if np.any(x < 0):
            problems.append(f"{node.id}: negative counts")
        if not node.is_leaf:
            kids = sum((np.asarray(out.solutions.get(c, 0)) for c in node.children))
            if not np.array_equal(kids, x):
                problems.append(f"{node.id}: children do not sum to the parent")
        for v in violations(x, _node_rows(node, schema, InvariantSpec(
                False, None, invariants.housing_unit_count, invariants.occupied_gq,
                invariants.gq_attribute, invariants.gq_types, invariants.householder), zeros, None), 0.0):
            problems.append(f"{v}")
    if cef is not None and invariants.state_total:
        hists = aggregate(spine, cef, schema.size)
        totals = invariant_totals(spine, {l: int(hists[l].sum()) for l in spine.leaves()}, invariants)
        got: dict[str, int] = {}
        depth = spine.level_names.index(invariants.resolved_state_level(spine))
        for node in spine.iter_nodes():
            if node.level <= depth:
                key = node.id if node.level < depth else invariant_key(node)
                got[key] = got.get(key, 0) + int(np.asarray(out.solutions[node.id]).sum())
        for key, want in totals.items():
            if got.get(key) != want:
                problems.append(f"{key}: invariant total {got.get(key)} != {want}")
    return problems


def mdf_emit(out: MdfOutput) -> Iterator[tuple[str, ...]]:
    """One row per record: geocode then attribute labels, ordered by geocode then cell."""
    schema = out.schema
    for leaf in sorted(out.spine.leaves()):
        x = out.solutions[leaf]
        for cell in np.flatnonzero(x):
            labels = schema.labels_of_cell(int(cell))
            for _ in range(int(x[cell])):
                yield (leaf,) + labels


def default_workers() -> int:
    return os.cpu_count() or 1

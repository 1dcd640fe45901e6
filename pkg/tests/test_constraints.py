import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topdown.constraints import (
    ConstraintError,
    ConstraintSet,
    InputInconsistency,
    InvariantSpec,
    StructuralZeroSet,
    build_children_constraints,
    build_root_constraints,
    check_feasible,
    invariant_totals,
    tum_check,
    verify_confidential,
    violations,
)
from topdown.schema import Schema
from topdown.spine import NodeRecord, Spine, build_aian_spine

SCHEMA = Schema.from_levels({"hhgq": ["hh", "inst", "noninst"], "age": ["kid", "adult"]})
INV = InvariantSpec(state_total=True, housing_unit_count=False, occupied_gq=True, gq_attribute="hhgq",
                    householder={"hhgq": ("hh",), "age": ("adult",)})


def small_spine(gq=None):
    return Spine.build([
        NodeRecord("US", None, "us"),
        NodeRecord("S", "US", "state"),
        NodeRecord("b1", "S", "block", housing_units=3, occupied_gq=gq or {}),
        NodeRecord("b2", "S", "block", housing_units=2),
    ])


def test_empty_without_invariants():
    cs = build_root_constraints(small_spine().root_node, SCHEMA)
    assert len(cs) == 0 and cs.n == SCHEMA.size


def test_state_total_row():
    s = small_spine()
    cs = build_root_constraints(s["S"], SCHEMA, InvariantSpec(state_total=True), totals={"S": 100})
    assert cs.n_eq == 1 and cs.n_ub == 0
    assert np.array_equal(cs.eq_matrix.toarray(), np.ones((1, SCHEMA.size)))
    assert cs.eq_rhs.tolist() == [100]


def test_gq_lower_bound_row():
    s = small_spine({"inst": 2})
    inv = InvariantSpec(occupied_gq=True, gq_attribute="hhgq")
    cs = build_root_constraints(s["b1"], SCHEMA, inv)
    mask = SCHEMA.cell_mask({"hhgq": ["inst"]}).astype(float)
    assert cs.n_ub == 1
    assert np.array_equal(cs.ub_matrix.toarray()[0], -mask) and cs.ub_rhs[0] == -2
    # the type without a facility is pinned to zero
    nonmask = SCHEMA.cell_mask({"hhgq": ["noninst"]}).astype(float)
    assert cs.n_eq == 1 and np.array_equal(cs.eq_matrix.toarray()[0], nonmask)


def test_householder_and_zero_rows():
    s = small_spine()
    zeros = StructuralZeroSet(({"hhgq": ("inst",), "age": ("kid",)},))
    inv = InvariantSpec(householder={"hhgq": ("hh",), "age": ("adult",)}, housing_unit_count=False)
    cs = build_root_constraints(s["b1"], SCHEMA, inv, zeros)
    assert cs.n_ub == 1 and cs.ub_rhs[0] == 3
    assert cs.n_eq == 1
    x = np.zeros(SCHEMA.size)
    x[SCHEMA.cell_of_labels(["inst", "kid"])] = 1
    assert not check_feasible(x, cs)
    x[:] = 0
    x[SCHEMA.cell_of_labels(["hh", "adult"])] = 4
    assert violations(x, cs) and "householders" in violations(x, cs)[0]


def test_one_child_equals_parent():
    s = small_spine()
    parent = np.array([1, 0, 2, 3, 0, 1])
    cs = build_children_constraints(parent, [s["b1"]], SCHEMA)
    assert check_feasible(parent, cs)
    other = parent.copy()
    other[0] += 1
    assert not check_feasible(other, cs)


def test_two_children_sum_to_parent_cell():
    s = small_spine()
    parent = np.zeros(SCHEMA.size, dtype=int)
    parent[2] = 5
    cs = build_children_constraints(parent, [s["b1"], s["b2"]], SCHEMA)
    for k in range(6):
        x = np.zeros(2 * SCHEMA.size)
        x[2], x[SCHEMA.size + 2] = k, 5 - k
        assert check_feasible(x, cs)
    x = np.zeros(2 * SCHEMA.size)
    x[2] = 4
    assert not check_feasible(x, cs)


def test_inconsistent_gq_fixture_is_flagged_on_confidential_data():
    # the children declare 3 institutional facilities while the confidential parent has one person there
    s = small_spine({"inst": 3})
    inv = InvariantSpec(occupied_gq=True, gq_attribute="hhgq")
    b1 = np.zeros(SCHEMA.size, dtype=int)
    b1[SCHEMA.cell_of_labels(["inst", "adult"])] = 1
    b2 = np.zeros(SCHEMA.size, dtype=int)
    cs = build_children_constraints(b1 + b2, [s["b1"], s["b2"]], SCHEMA, inv)
    assert not check_feasible(np.concatenate([b1, b2]), cs)
    with pytest.raises(InputInconsistency):
        verify_confidential(np.concatenate([b1, b2]), cs)


def test_children_payload_mismatch_and_bad_parent():
    s = small_spine()
    with pytest.raises(ConstraintError):
        build_children_constraints(np.zeros(SCHEMA.size), [s["b1"]], SCHEMA, parent=s["S"])
    with pytest.raises(ConstraintError):
        build_children_constraints(np.full(SCHEMA.size, 0.5), [s["b1"]], SCHEMA)
    with pytest.raises(ConstraintError):
        build_children_constraints(np.zeros(3), [s["b1"]], SCHEMA)


def test_invariant_totals_and_aian_group_row():
    s = Spine.build([
        NodeRecord("US", None, "us"), NodeRecord("S", "US", "state"),
        NodeRecord("a", "S", "block", aian_flag=True), NodeRecord("b", "S", "block"),
    ])
    leaf_totals = {"a": 4, "b": 6}
    inv = InvariantSpec(state_total=True)
    split = build_aian_spine(s)
    totals = invariant_totals(split, leaf_totals, inv)
    assert totals == {"US": 10, "S": 10}
    children = [split[c] for c in split.root_node.children]
    parent = np.zeros(SCHEMA.size, dtype=int)
    parent[0] = 10
    cs = build_children_constraints(parent, children, SCHEMA, inv, totals=totals, level_names=split.level_names)
    assert any("state total = 10" in l for l in cs.eq_labels)
    x = np.zeros(2 * SCHEMA.size)
    x[0], x[SCHEMA.size] = 3, 7
    assert check_feasible(x, cs)


def test_confidential_histograms_satisfy_every_built_set():
    rng = np.random.default_rng(0)
    zeros = StructuralZeroSet(({"hhgq": ("inst",), "age": ("kid",)},))
    for _ in range(50):
        leaves = []
        for i in range(3):
            x = rng.integers(0, 4, SCHEMA.size)
            x[SCHEMA.cell_mask({"hhgq": ["inst"], "age": ["kid"]})] = 0
            leaves.append(x)
        recs = [NodeRecord("US", None, "us"), NodeRecord("S", "US", "state")]
        for i, x in enumerate(leaves):
            gq = {t: int(x[SCHEMA.cell_mask({"hhgq": [t]})].sum() > 0) for t in ("inst", "noninst")}
            gq = {t: k for t, k in gq.items() if k}
            hh = int(x[SCHEMA.cell_mask({"hhgq": ["hh"], "age": ["adult"]})].sum()) + int(rng.integers(0, 3))
            recs.append(NodeRecord(f"b{i}", "S", "block", housing_units=hh, occupied_gq=gq))
        s = Spine.build(recs)
        totals = invariant_totals(s, {f"b{i}": int(x.sum()) for i, x in enumerate(leaves)}, INV)
        parent = sum(leaves)
        verify_confidential(parent, build_root_constraints(s["S"], SCHEMA, INV, zeros, totals, s.level_names))
        cs = build_children_constraints(parent, [s[f"b{i}"] for i in range(3)], SCHEMA, INV, zeros,
                                        totals, s.level_names, s["S"])
        verify_confidential(np.concatenate(leaves), cs)


def test_constraint_set_shape_checks_and_embed():
    with pytest.raises(ConstraintError):
        ConstraintSet(3, np.ones((1, 2)), np.ones(1), np.zeros((0, 3)), np.zeros(0))
    cs = ConstraintSet(2, np.array([[1, 1]]), np.array([2]), np.zeros((0, 2)), np.zeros(0))
    big = cs.embed(2, 5)
    assert big.eq_matrix.toarray().tolist() == [[0, 0, 1, 1, 0]]
    with pytest.raises(ConstraintError):
        cs.combine(big)
    with pytest.raises(ConstraintError):
        violations(np.zeros(3), cs)


def brute_tum(a):
    a = np.asarray(a)
    r, c = a.shape
    for k in range(1, min(r, c) + 1):
        for rows in itertools.combinations(range(r), k):
            for cols in itertools.combinations(range(c), k):
                if abs(round(np.linalg.det(a[np.ix_(rows, cols)]))) > 1:
                    return False
    return True


def test_tum_examples():
    assert tum_check(np.eye(4))
    interval = np.array([[1, 1, 1, 0], [0, 1, 1, 1], [0, 0, 1, 0], [1, 1, 0, 0]])
    assert tum_check(interval)
    assert not tum_check(np.array([[1, 1], [-1, 1]]))
    assert not tum_check(np.array([[1, 0, 1], [1, 1, 0], [0, 1, 1]]))
    assert not tum_check(np.array([[0.5]]))
    with pytest.raises(ConstraintError):
        tum_check(np.zeros((9, 2)))


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.data())
def test_tum_matches_float_determinants(r, c, data):
    a = np.array(data.draw(st.lists(st.lists(st.integers(-1, 1), min_size=c, max_size=c), min_size=r, max_size=r)))
    assert tum_check(a) == brute_tum(a)


def test_aggregation_plus_lower_bounds_is_tum():
    # the rounder's row structure: per-cell sums over children and per-child group bounds
    agg = np.hstack([np.eye(3)] * 2)
    child = np.kron(np.eye(2), np.ones((1, 3)))
    assert tum_check(np.vstack([agg, child]))

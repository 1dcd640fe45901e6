import numpy as np
import pytest

from topdown.schema import Schema
from topdown.spine import NodeRecord, Spine


def chain_spine(fanouts, level_names=None, hu=10):
    """Regular tree with the given fan-out per level (root first)."""
    names = level_names or [f"L{i}" for i in range(len(fanouts) + 1)]
    recs = [NodeRecord("R", None, names[0])]
    frontier = ["R"]
    for depth, k in enumerate(fanouts, start=1):
        nxt = []
        for p in frontier:
            for i in range(k):
                nid = f"{p}.{i}"
                recs.append(NodeRecord(nid, p, names[depth], housing_units=hu))
                nxt.append(nid)
        frontier = nxt
    return Spine.build(recs, names)


def spine_from_parents(parents):
    """Tree from a parent list (parents[0] is None, parents[i] < i)."""
    recs = []
    for i, p in enumerate(parents):
        recs.append(NodeRecord(f"n{i}", None if p is None else f"n{p}", "x"))
    return Spine.build(recs, ["x"])


@pytest.fixture
def schema23():
    return Schema.from_levels({"a": ["a0", "a1"], "b": ["b0", "b1", "b2"]})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

"""Geographic spine: rooted tree of nodes with housing-unit and group-quarters payloads.

Leaf payloads are the source of truth; every internal node's payload is the sum
over its leaves. Transformations (AIAN branching, single-child bypass, custom
block groups) return new spines and never touch the leaf set.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from types import MappingProxyType
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

if TYPE_CHECKING:
    from .privacy import AllocationTable


class SpineError(ValueError):
    pass


@dataclass(frozen=True)
class GeoNode:
    id: str
    level: int
    level_name: str
    parent: str | None
    children: tuple[str, ...] = ()
    housing_units: int = 0
    occupied_gq: Mapping[str, int] = field(default_factory=dict)
    aian_flag: bool = False
    origin: str | None = None  # tabulation entity this node was carved out of

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        gq = {k: int(v) for k, v in dict(self.occupied_gq).items() if int(v) != 0}
        if any(v < 0 for v in gq.values()) or self.housing_units < 0:
            raise SpineError(f"negative payload on node {self.id!r}")
        object.__setattr__(self, "occupied_gq", MappingProxyType(dict(sorted(gq.items()))))

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def gq_total(self) -> int:
        return sum(self.occupied_gq.values())


@dataclass(frozen=True)
class NodeRecord:
    """Flat description of a node used to (re)build a spine."""

    id: str
    parent: str | None
    level_name: str
    housing_units: int = 0
    occupied_gq: Mapping[str, int] = field(default_factory=dict)
    aian_flag: bool = False
    origin: str | None = None
    level: int | None = None


@dataclass(frozen=True)
class OffSpineEntity:
    name: str
    leaves: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "leaves", frozenset(self.leaves))
        if not self.leaves:
            raise SpineError(f"off-spine entity {self.name!r} has no leaves")


class Spine:
    """Immutable rooted geographic tree."""

    def __init__(self, nodes: Mapping[str, GeoNode], root: str, level_names: Sequence[str]):
        self._nodes = dict(nodes)
        self.root = root
        self.level_names = tuple(level_names)
        self._leaf_cache: dict[str, tuple[str, ...]] = {}
        self._check()

    # construction ---------------------------------------------------------

    @classmethod
    def build(cls, records: Iterable[NodeRecord], level_names: Sequence[str] | None = None) -> "Spine":
        records = list(records)
        by_id: dict[str, NodeRecord] = {}
        for r in records:
            if r.id in by_id:
                raise SpineError(f"duplicate geocode {r.id!r}")
            by_id[r.id] = r
        roots = [r.id for r in records if r.parent in (None, "")]
        if len(roots) != 1:
            raise SpineError(f"expected exactly one root, found {len(roots)}")
        children: dict[str, list[str]] = {r.id: [] for r in records}
        for r in records:
            if r.parent not in (None, ""):
                if r.parent not in by_id:
                    raise SpineError(f"node {r.id!r} has unknown parent {r.parent!r}")
                children[r.parent].append(r.id)

        depth: dict[str, int] = {}
        order: list[str] = []
        stack = [(roots[0], 0)]
        while stack:
            nid, d = stack.pop()
            if nid in depth:
                raise SpineError(f"cycle through {nid!r}")
            depth[nid] = d
            order.append(nid)
            for c in reversed(children[nid]):
                stack.append((c, d + 1))
        if len(depth) != len(records):
            unreachable = sorted(set(by_id) - set(depth))
            raise SpineError(f"nodes not reachable from root: {unreachable[:5]}")

        hu: dict[str, int] = {}
        gq: dict[str, Counter] = {}
        for nid in reversed(order):
            r = by_id[nid]
            if children[nid]:
                hu[nid] = sum(hu[c] for c in children[nid])
                gq[nid] = sum((gq[c] for c in children[nid]), Counter())
            else:
                hu[nid] = int(r.housing_units)
                gq[nid] = Counter({k: int(v) for k, v in r.occupied_gq.items()})

        nodes = {}
        for nid in order:
            r = by_id[nid]
            nodes[nid] = GeoNode(
                id=nid,
                level=depth[nid] if r.level is None else r.level,
                level_name=r.level_name,
                parent=r.parent or None,
                children=tuple(children[nid]),
                housing_units=hu[nid],
                occupied_gq=dict(gq[nid]),
                aian_flag=bool(r.aian_flag) if not children[nid] else False,
                origin=r.origin,
            )
        if level_names is None:
            names: dict[int, str] = {}
            for n in nodes.values():
                names.setdefault(n.level, n.level_name)
            level_names = [names[k] for k in sorted(names)]
        return cls(nodes, roots[0], level_names)

    def records(self) -> list[NodeRecord]:
        return [
            NodeRecord(
                n.id, n.parent, n.level_name, n.housing_units, dict(n.occupied_gq),
                n.aian_flag, n.origin, n.level,
            )
            for n in self.iter_nodes()
        ]

    def _check(self):
        if self.root not in self._nodes:
            raise SpineError("root missing")
        for n in self._nodes.values():
            for c in n.children:
                if self._nodes[c].parent != n.id:
                    raise SpineError(f"inconsistent parent link {n.id!r} -> {c!r}")

    # access ---------------------------------------------------------------

    def __getitem__(self, node_id: str) -> GeoNode:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise SpineError(f"unknown geocode {node_id!r}") from None

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def root_node(self) -> GeoNode:
        return self._nodes[self.root]

    def iter_nodes(self) -> list[GeoNode]:
        """Nodes in pre-order (parents before children, children in declared order)."""
        out = []
        stack = [self.root]
        while stack:
            n = self._nodes[stack.pop()]
            out.append(n)
            stack.extend(reversed(n.children))
        return out

    def leaves(self, node_id: str | None = None) -> tuple[str, ...]:
        node_id = self.root if node_id is None else node_id
        if node_id not in self._leaf_cache:
            n = self[node_id]
            if n.is_leaf:
                self._leaf_cache[node_id] = (node_id,)
            else:
                self._leaf_cache[node_id] = tuple(
                    l for c in n.children for l in self.leaves(c)
                )
        return self._leaf_cache[node_id]

    def path(self, node_id: str) -> list[str]:
        """Node ids from the root down to ``node_id``."""
        out = []
        cur: str | None = node_id
        while cur is not None:
            out.append(cur)
            cur = self[cur].parent
        return out[::-1]

    def parents_top_down(self) -> list[str]:
        """Internal nodes in breadth-first order (every parent precedes its descendants)."""
        out = []
        frontier = [self.root]
        while frontier:
            nxt = []
            for nid in frontier:
                n = self._nodes[nid]
                if n.children:
                    out.append(nid)
                    nxt.extend(n.children)
            frontier = nxt
        return out

    def nodes_at(self, level_name: str) -> list[str]:
        return [n.id for n in self.iter_nodes() if n.level_name == level_name]

    def subtree_nodes(self, node_id: str) -> list[str]:
        out = []
        stack = [node_id]
        while stack:
            n = self[stack.pop()]
            out.append(n.id)
            stack.extend(reversed(n.children))
        return out

    # I/O ------------------------------------------------------------------

    @classmethod
    def from_csv(cls, text_or_path) -> "Spine":
        """Read a ``geocode,parent_geocode,level_name,housing_units,gq_type_counts,aian_flag`` edge list."""
        if isinstance(text_or_path, str) and "\n" in text_or_path:
            fh = io.StringIO(text_or_path)
        else:
            fh = open(text_or_path, newline="", encoding="utf-8")
        with fh:
            reader = csv.DictReader(fh)
            records = []
            for row in reader:
                gq = {}
                raw = (row.get("gq_type_counts") or "").strip()
                if raw:
                    for item in raw.split(";"):
                        k, _, v = item.partition(":")
                        gq[k.strip()] = int(v)
                records.append(
                    NodeRecord(
                        id=row["geocode"].strip(),
                        parent=(row.get("parent_geocode") or "").strip() or None,
                        level_name=row["level_name"].strip(),
                        housing_units=int(row.get("housing_units") or 0),
                        occupied_gq=gq,
                        aian_flag=(row.get("aian_flag") or "0").strip().lower() in ("1", "true", "yes"),
                    )
                )
        return cls.build(records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["geocode", "parent_geocode", "level_name", "housing_units", "gq_type_counts", "aian_flag"])
        for n in self.iter_nodes():
            w.writerow([
                n.id, n.parent or "", n.level_name, n.housing_units,
                ";".join(f"{k}:{v}" for k, v in n.occupied_gq.items()),
                int(n.aian_flag),
            ])
        return buf.getvalue()


# transformations --------------------------------------------------------------


def build_aian_spine(
    spine: Spine, flags: Mapping[str, bool] | None = None, state_level: int = 1
) -> Spine:
    """Split every state holding flagged leaves into AIAN and balance state-equivalents.

    Descendants with leaves in both branches are subdivided so each new node sits
    entirely inside one branch. An empty branch is pruned.
    """
    leaves = set(spine.leaves())
    if flags is None:
        flags = {l: spine[l].aian_flag for l in leaves}
    unknown = set(flags) - leaves
    if unknown:
        raise SpineError(f"AIAN flag on unknown leaf ids {sorted(unknown)[:5]}")
    flag = {l: bool(flags.get(l, False)) for l in leaves}
    if not any(spine[n.id].level == state_level for n in spine.iter_nodes()):
        raise SpineError(f"spine has no nodes at state level {state_level}")

    records: list[NodeRecord] = []

    def copy_subtree(nid: str, parent: str | None, new_id: str | None = None, origin=None):
        n = spine[nid]
        this = new_id or nid
        records.append(NodeRecord(
            this, parent, n.level_name, n.housing_units, dict(n.occupied_gq),
            flag.get(nid, False) if n.is_leaf else False, origin or n.origin, n.level,
        ))
        for c in n.children:
            copy_subtree(c, this)

    def branch_subtree(nid: str, parent: str, want: bool, suffix: str, forced_id: str | None):
        n = spine[nid]
        lv = [l for l in spine.leaves(nid) if flag[l] == want]
        if not lv:
            return
        pure = len(lv) == len(spine.leaves(nid))
        if forced_id is None and pure:
            copy_subtree(nid, parent)
            return
        this = forced_id or f"{nid}{suffix}"
        records.append(NodeRecord(this, parent, n.level_name, n.housing_units, dict(n.occupied_gq),
                                  False, nid, n.level))
        for c in n.children:
            branch_subtree(c, this, want, suffix, None)

    def walk(nid: str, parent: str | None):
        n = spine[nid]
        if n.level == state_level:
            if not any(flag[l] for l in spine.leaves(nid)):
                copy_subtree(nid, parent)
                return
            for want, suffix in ((True, "_aian"), (False, "_rest")):
                branch_subtree(nid, parent, want, suffix, f"{nid}{suffix}")
            return
        records.append(NodeRecord(n.id, parent, n.level_name, n.housing_units,
                                  dict(n.occupied_gq), flag.get(nid, False), n.origin, n.level))
        for c in n.children:
            walk(c, n.id)

    walk(spine.root, None)
    return Spine.build(records, spine.level_names)


def _merge_chains(spine: Spine) -> dict[str, list[str]]:
    """Map surviving node id -> chain of original ids it absorbs (top to bottom)."""
    chains: dict[str, list[str]] = {}

    def visit(nid: str):
        chain = [nid]
        while len(spine[chain[-1]].children) == 1:
            chain.append(spine[chain[-1]].children[0])
        bottom = spine[chain[-1]]
        keep = bottom.id if bottom.is_leaf else chain[0]
        chains[keep] = chain
        for c in bottom.children:
            visit(c)

    visit(spine.root)
    return chains


def bypass_single_child(spine: Spine, allocation: "AllocationTable"):
    """Collapse unary parent/child chains into one node holding the chain's summed share.

    The merged node measures each query group with precision equal to the sum of
    the precisions the chain gave it, so per-query shares become the
    share-weighted mixture of the chain's query shares.
    """
    chains = _merge_chains(spine)
    rename = {}
    for keep, chain in chains.items():
        for nid in chain:
            rename[nid] = keep

    records = []
    node_c: dict[str, Fraction] = {}
    node_d: dict[str, dict[str, Fraction]] = {}
    for n in spine.iter_nodes():
        if rename[n.id] != n.id:
            continue
        chain = chains[n.id]
        top, bottom = spine[chain[0]], spine[chain[-1]]
        parent = rename[top.parent] if top.parent is not None else None
        records.append(NodeRecord(
            n.id, parent, top.level_name, bottom.housing_units, dict(bottom.occupied_gq),
            bottom.aian_flag, n.origin if n.id == top.id else top.origin or n.origin, top.level,
        ))
        if len(chain) > 1:
            shares = [(allocation.node_share(spine[c]), allocation.query_shares(spine[c])) for c in chain]
            total = sum((c for c, _ in shares), Fraction(0))
            node_c[n.id] = total
            mix: dict[str, Fraction] = {}
            for c, d in shares:
                if c == 0:
                    # an unmeasured chain stays unmeasured
                    continue
                for g, v in d.items():
                    mix[g] = mix.get(g, Fraction(0)) + c * v / total
            node_d[n.id] = {g: v for g, v in mix.items() if v > 0}

    new_spine = _build_ordered(records, spine.level_names)
    kept = set(new_spine._nodes)
    new_alloc = allocation.with_node_overrides(node_c, node_d, keep=kept)
    return new_spine, new_alloc


def _build_ordered(records: list[NodeRecord], level_names) -> Spine:
    return Spine.build(records, level_names)


def off_spine_distance(entity: OffSpineEntity | Iterable[str], spine: Spine) -> int:
    """Minimum number of signed on-spine subtree terms whose combination is the entity."""
    target = entity.leaves if isinstance(entity, OffSpineEntity) else frozenset(entity)
    leaves = set(spine.leaves())
    unknown = target - leaves
    if unknown:
        raise SpineError(f"entity references unknown leaves {sorted(unknown)[:5]}")

    # a: cost of building (entity ∩ subtree); b: cost of building (subtree minus entity)
    a: dict[str, int] = {}
    b: dict[str, int] = {}
    for n in reversed(spine.iter_nodes()):
        if n.is_leaf:
            inside = n.id in target
            a[n.id], b[n.id] = (1, 0) if inside else (0, 1)
            continue
        sa = sum(a[c] for c in n.children)
        sb = sum(b[c] for c in n.children)
        a[n.id] = min(sa, 1 + sb)
        b[n.id] = min(sb, 1 + sa)
    return a[spine.root]


def total_off_spine_distance(spine: Spine, targets: Sequence[OffSpineEntity]) -> int:
    return sum(off_spine_distance(t, spine) for t in targets)


def _gq_signature(spine: Spine, leaf: str) -> frozenset[str]:
    return frozenset(spine[leaf].occupied_gq)


def _regroup(spine: Spine, level_name: str, partition: Mapping[str, list[frozenset[str]]]) -> Spine:
    """Replace the children of each tract in ``partition`` by the given leaf groups."""
    records = []
    for n in spine.iter_nodes():
        if n.level_name == level_name and n.parent in partition:
            continue
        if n.is_leaf and spine[n.parent].level_name == level_name and spine[n.parent].parent in partition:
            continue
        records.append(NodeRecord(n.id, n.parent, n.level_name, n.housing_units,
                                  dict(n.occupied_gq), n.aian_flag, n.origin, n.level))
        if n.id in partition:
            original = {frozenset(spine.leaves(c)): c for c in n.children}
            for i, group in enumerate(partition[n.id]):
                gid = original.get(group) or f"{n.id}_cbg{i + 1}"
                level = spine[n.children[0]].level
                records.append(NodeRecord(gid, n.id, level_name, level=level))
                ordered = [l for l in spine.leaves(n.id) if l in group]
                for l in ordered:
                    leaf = spine[l]
                    records.append(NodeRecord(l, gid, leaf.level_name, leaf.housing_units,
                                              dict(leaf.occupied_gq), leaf.aian_flag, leaf.origin,
                                              leaf.level))
    return Spine.build(records, spine.level_names)


def optimize_block_groups(
    spine: Spine, targets: Sequence[OffSpineEntity] = (), level_name: str = "block_group"
) -> Spine:
    """Greedy custom block groups.

    GQ-bearing blocks are first separated from housing-unit-only blocks (one group
    per GQ type signature). Then, repeatedly, the target with the largest current
    off-spine distance has every block group it cuts split into its inside and
    outside parts; a split is kept only if the summed distance over all targets
    drops. Groups always nest inside their tract.
    """
    tracts = []
    for n in spine.iter_nodes():
        if n.children and all(spine[c].level_name == level_name for c in n.children):
            tracts.append(n.id)
    if not tracts:
        return spine

    partition: dict[str, list[frozenset[str]]] = {}
    for t in tracts:
        groups = []
        for bg in spine[t].children:
            members = spine.leaves(bg)
            plain = [l for l in members if not spine[l].occupied_gq]
            if plain:
                groups.append(frozenset(plain))
            by_sig: dict[frozenset[str], list[str]] = {}
            for l in members:
                sig = _gq_signature(spine, l)
                if sig:
                    by_sig.setdefault(sig, []).append(l)
            for sig in sorted(by_sig, key=lambda s: spine.leaves(t).index(by_sig[s][0])):
                groups.append(frozenset(by_sig[sig]))
        partition[t] = groups

    current = _regroup(spine, level_name, partition)
    if not targets:
        return current
    score = total_off_spine_distance(current, targets)
    done: set[str] = set()
    while True:
        ranked = sorted(
            (t for t in targets if t.name not in done),
            key=lambda t: -off_spine_distance(t, current),
        )
        improved = False
        for target in ranked:
            trial = {}
            changed = False
            for t, groups in partition.items():
                new_groups = []
                for g in groups:
                    inside, outside = g & target.leaves, g - target.leaves
                    if inside and outside:
                        changed = True
                        new_groups.extend(sorted((inside, outside), key=lambda s: spine.leaves(t).index(min(s, key=spine.leaves(t).index))))
                    else:
                        new_groups.append(g)
                trial[t] = new_groups
            if not changed:
                done.add(target.name)
                continue
            candidate = _regroup(spine, level_name, trial)
            new_score = total_off_spine_distance(candidate, targets)
            if new_score < score:
                partition, current, score = trial, candidate, new_score
                improved = True
                break
            done.add(target.name)
        if not improved:
            return current


def path_variance(spine: Spine, allocation: "AllocationTable", group: str, leaf: str) -> Fraction:
    """Sum of measurement variances of ``group`` along the root-to-leaf path (unmeasured levels skipped)."""
    total = Fraction(0)
    for nid in spine.path(leaf):
        node = spine[nid]
        d = allocation.query_shares(node).get(group, Fraction(0))
        c = allocation.node_share(node)
        if c > 0 and d > 0:
            total += allocation.psi_squared / (c * d)
    return total

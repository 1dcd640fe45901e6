"""Run configuration: sectioned ``key = value`` files with exact fraction literals.

Recode syntax (``[queries]``): ``attr`` keeps every level of ``attr``;
``attr=a+b,c`` groups levels ``a`` and ``b`` together and keeps ``c`` alone.
Several attributes are joined with ``;``. Cell predicates (structural zeros,
householder cells) use the same shape: ``attr=a+b; other=c`` is a conjunction
whose parts each allow any listed level.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .constraints import InvariantSpec, StructuralZeroSet
from .engine import QueryStrategy
from .privacy import AllocationTable, as_fraction, total_rho
from .schema import Recode, Schema, build_marginal
from .spine import (
    OffSpineEntity,
    Spine,
    build_aian_spine,
    bypass_single_child,
    optimize_block_groups,
)


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _list(v: str, sep: str = ",") -> list[str]:
    return [s.strip() for s in v.split(sep) if s.strip()]


def parse_predicate(text: str) -> dict[str, tuple[str, ...]]:
    out = {}
    for part in _list(text, ";"):
        attr, eq, levels = part.partition("=")
        if not eq:
            raise ConfigError(f"predicate part {part!r} must look like attr=level+level")
        out[attr.strip()] = tuple(_list(levels, "+"))
    return out


def parse_recodes(schema: Schema, text: str) -> list[Recode]:
    recodes = []
    for part in _list(text, ";"):
        attr_name, eq, groups = part.partition("=")
        attr = schema.attribute(attr_name.strip())
        if not eq:
            recodes.append(Recode.identity(attr))
        else:
            recodes.append(Recode.from_labels(attr, [_list(g, "+") for g in _list(groups, ",")]))
    return recodes


def parse_passes(text: str) -> tuple[tuple[str, ...], ...]:
    return tuple(tuple(_list(p, ",")) for p in text.split("|"))


@dataclass
class ReportSettings:
    levels: list[str] = field(default_factory=list)
    queries: list[str] = field(default_factory=lambda: ["TOTAL"])
    buckets: list[tuple[int, int | None]] = field(default_factory=list)
    categories: str | None = None
    threshold: float = 0.05
    min_pop: int = 500
    required: float = 0.95


@dataclass
class SynthSettings:
    leaf_mean: float = 20.0
    gq_extra: float = 0.0
    weights: dict[str, list[float]] = field(default_factory=dict)
    out: Path | None = None


@dataclass
class RunConfig:
    path: Path
    digest: str
    schema: Schema
    strategy: QueryStrategy
    allocation: AllocationTable
    invariants: InvariantSpec
    zeros: StructuralZeroSet
    spine_path: Path
    aian: bool = False
    aian_level: str | None = None
    bypass: bool = False
    custom_block_groups: bool = False
    block_group_level: str = "block_group"
    entities_path: Path | None = None
    seed: int = 0
    engine: str = "topdown"
    workers: int = 1
    deltas: tuple[float, ...] = (1e-10,)
    microdata: Path | None = None
    output_dir: Path | None = None
    report: ReportSettings = field(default_factory=ReportSettings)
    synth: SynthSettings = field(default_factory=SynthSettings)

    def entities(self) -> list[OffSpineEntity]:
        if self.entities_path is None:
            return []
        from .io import read_entities
        return read_entities(self.entities_path)

    def build_plan(self) -> tuple[Spine, AllocationTable]:
        """Load and transform the spine, then validate the allocation on it (no microdata needed)."""
        spine = Spine.from_csv(self.spine_path)
        alloc = self.allocation
        if self.aian:
            level = self.aian_level or self.invariants.state_level or spine.level_names[1]
            spine = build_aian_spine(spine, state_level=spine.level_names.index(level))
        if self.custom_block_groups:
            spine = optimize_block_groups(spine, self.entities(), self.block_group_level)
        total_rho(alloc, spine)
        if self.bypass:
            spine, alloc = bypass_single_child(spine, alloc)
            total_rho(alloc, spine)
        return spine, alloc


def load_config(path, overrides: Mapping[str, str] | None = None) -> RunConfig:
    path = Path(path)
    raw = path.read_bytes()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(raw.decode("utf-8"), source=str(path))
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    base = path.parent

    def rel(v: str) -> Path:
        p = Path(v.strip())
        return p if p.is_absolute() else base / p

    def section(name: str) -> Mapping[str, str]:
        return parser[name] if parser.has_section(name) else {}

    if not parser.has_section("schema") or not parser["schema"]:
        raise ConfigError("config needs a non-empty [schema] section")
    schema = Schema.from_levels({k: _list(v) for k, v in parser["schema"].items()})

    groups = []
    for name, spec in section("queries").items():
        groups.append(build_marginal(schema, parse_recodes(schema, spec), name))
    l2, rounder = {}, {}
    for key, v in section("passes").items():
        kind, _, level = key.partition(".")
        if kind not in ("l2", "rounder") or not level:
            raise ConfigError(f"pass key {key!r} must be l2.<level> or rounder.<level>")
        (l2 if kind == "l2" else rounder)[level] = parse_passes(v)
    strategy = QueryStrategy.from_groups(schema, groups, l2_passes=l2, rounder_passes=rounder)

    alloc_sec = section("allocation")
    if "psi_squared" in alloc_sec:
        psi2 = as_fraction(alloc_sec["psi_squared"])
    elif "rho" in alloc_sec:
        psi2 = 1 / as_fraction(alloc_sec["rho"])
    else:
        raise ConfigError("[allocation] needs rho or psi_squared")
    level_shares = {k: as_fraction(v) for k, v in section("geolevel_shares").items()}
    if not level_shares:
        raise ConfigError("config needs a [geolevel_shares] section")
    default_q = {k: as_fraction(v) for k, v in section("query_shares").items()}
    qshares = {}
    for level in level_shares:
        sec = f"query_shares.{level}"
        qshares[level] = {k: as_fraction(v) for k, v in parser[sec].items()} if parser.has_section(sec) else dict(default_q)
    for name in {g for d in qshares.values() for g in d}:
        strategy.group(name)
    allocation = AllocationTable(psi2, level_shares, qshares)

    inv = section("invariants")
    invariants = InvariantSpec(
        state_total=_bool(inv.get("state_total", "false")),
        state_level=inv.get("state_level") or None,
        housing_unit_count=_bool(inv.get("housing_unit_count", "false")),
        occupied_gq=_bool(inv.get("occupied_gq", "false")),
        gq_attribute=inv.get("gq_attribute") or None,
        gq_types=tuple(_list(inv["gq_types"])) if inv.get("gq_types") else None,
        householder=parse_predicate(inv["householder"]) if inv.get("householder") else None,
    )
    if invariants.occupied_gq:
        invariants.resolved_gq_types(schema)
    if invariants.householder:
        schema.cell_mask(invariants.householder)
    zeros = StructuralZeroSet(tuple(parse_predicate(v) for v in section("structural_zeros").values()))
    zeros.mask(schema)

    sp = section("spine")
    if "path" not in sp:
        raise ConfigError("[spine] needs a path")
    run = dict(section("run"))
    run.update(overrides or {})
    engine = run.get("engine", "topdown")
    if engine not in ("topdown", "block_by_block"):
        raise ConfigError(f"unknown engine {engine!r}")

    rep = section("report")
    buckets = []
    if rep.get("buckets"):
        edges = [int(x) for x in _list(rep["buckets"])]
        buckets = [(a, b) for a, b in zip(edges, edges[1:])] + [(edges[-1], None)]
    report = ReportSettings(
        levels=_list(rep.get("levels", "")),
        queries=_list(rep.get("queries", "TOTAL")),
        buckets=buckets,
        categories=rep.get("categories") or None,
        threshold=float(rep.get("threshold", 0.05)),
        min_pop=int(rep.get("min_pop", 500)),
        required=float(rep.get("required", 0.95)),
    )
    for q in report.queries + ([report.categories] if report.categories else []):
        strategy.group(q)

    syn = section("synthesize")
    synth = SynthSettings(
        leaf_mean=float(syn.get("leaf_mean", 20)),
        gq_extra=float(syn.get("gq_extra", 0)),
        weights={k.split(".", 1)[1]: [float(x) for x in _list(v)] for k, v in syn.items() if k.startswith("weights.")},
        out=rel(syn["out"]) if syn.get("out") else None,
    )
    for attr, w in synth.weights.items():
        if len(w) != len(schema.attribute(attr)):
            raise ConfigError(f"synthesis weights for {attr!r} need {len(schema.attribute(attr))} entries")

    try:
        return RunConfig(
            path=path,
            digest=hashlib.sha256(raw).hexdigest(),
            schema=schema,
            strategy=strategy,
            allocation=allocation,
            invariants=invariants,
            zeros=zeros,
            spine_path=rel(sp["path"]),
            aian=_bool(sp.get("aian", "false")),
            aian_level=sp.get("aian_level") or None,
            bypass=_bool(sp.get("bypass", "false")),
            custom_block_groups=_bool(sp.get("custom_block_groups", "false")),
            block_group_level=sp.get("block_group_level", "block_group"),
            entities_path=rel(sp["entities"]) if sp.get("entities") else None,
            seed=int(run.get("seed", 0)),
            engine=engine,
            workers=int(run.get("workers", 1)),
            deltas=tuple(float(x) for x in _list(run.get("deltas", "1e-10"))),
            microdata=rel(run["microdata"]) if run.get("microdata") else None,
            output_dir=rel(run["output_dir"]) if run.get("output_dir") else None,
            report=report,
            synth=synth,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e

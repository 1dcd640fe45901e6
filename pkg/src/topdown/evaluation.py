"""Accuracy metrics comparing protected output against the confidential data."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .schema import QueryGroup
from .spine import OffSpineEntity, Spine

QUANTILES = (0.005, 0.025, 0.25, 0.5, 0.75, 0.975, 0.995)


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class TabulationQuery:
    """A query group evaluated on a set of geographic units (a level or entity list)."""

    group: QueryGroup
    geography: str | tuple[OffSpineEntity, ...]

    def units(self, spine: Spine, leaf_hists: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        if isinstance(self.geography, str):
            return {n: _sum_leaves(spine.leaves(n), leaf_hists) for n in spine.nodes_at(self.geography)}
        return tabulate_entities(leaf_hists, self.geography)


def _sum_leaves(leaves, leaf_hists) -> np.ndarray:
    try:
        return sum(np.asarray(leaf_hists[l], dtype=np.int64) for l in leaves)
    except KeyError as e:
        raise AlignmentError(f"no histogram for geocode {e.args[0]!r}") from None


def tabulate_entities(leaf_hists: Mapping[str, np.ndarray], entities: Sequence[OffSpineEntity]) -> dict[str, np.ndarray]:
    return {e.name: _sum_leaves(sorted(e.leaves), leaf_hists) for e in entities}


def _aligned(mdf: Mapping[str, np.ndarray], cef: Mapping[str, np.ndarray], units: Sequence[str] | None):
    units = sorted(cef) if units is None else list(units)
    for u in units:
        if u not in mdf:
            raise AlignmentError(f"geocode {u!r} missing from protected data")
        if u not in cef:
            raise AlignmentError(f"geocode {u!r} missing from confidential data")
    return units


def signed_errors(mdf, cef, query: QueryGroup, units=None) -> dict[str, np.ndarray]:
    units = _aligned(mdf, cef, units)
    return {u: np.asarray(query.matrix @ (np.asarray(mdf[u], np.int64) - np.asarray(cef[u], np.int64))) for u in units}


def abs_error_by_level(mdf, cef, query: QueryGroup, units=None) -> float:
    """Mean over units of the summed absolute error across the query's cells."""
    errs = signed_errors(mdf, cef, query, units)
    if not errs:
        return float("nan")
    return float(np.mean([np.abs(e).sum() for e in errs.values()]))


@dataclass(frozen=True)
class QuantileRow:
    bucket: tuple[int, int | None]
    units: int
    mean_abs: float
    quantiles: tuple[float, ...]
    empty: bool = False


def signed_quantiles(mdf, cef, query: QueryGroup, buckets: Sequence[tuple[int, int | None]],
                     units=None) -> list[QuantileRow]:
    """Per population bucket ``[lo, hi)``: mean L1 error and lower-interpolated signed-error quantiles."""
    errs = signed_errors(mdf, cef, query, units)
    rows = []
    for lo, hi in buckets:
        members = [u for u in errs if lo <= int(np.sum(cef[u])) and (hi is None or int(np.sum(cef[u])) < hi)]
        if not members:
            rows.append(QuantileRow((lo, hi), 0, float("nan"), (), empty=True))
            continue
        pooled = np.concatenate([errs[u] for u in members])
        q = np.quantile(pooled, QUANTILES, method="lower")
        rows.append(QuantileRow((lo, hi), len(members),
                                float(np.mean([np.abs(errs[u]).sum() for u in members])),
                                tuple(float(v) for v in q)))
    return rows


def blau_index(shares) -> float:
    """Heterogeneity 1 - sum p_i^2; raw counts are normalized first."""
    p = np.asarray(shares, dtype=float)
    if np.any(p < 0):
        raise ValueError("shares must be non-negative")
    total = p.sum()
    if total <= 0:
        raise ValueError("blau index undefined for an all-zero vector")
    p = p / total
    return float(1.0 - np.sum(p * p))


@dataclass(frozen=True)
class QuintileRow:
    quintile: int
    units: int
    mean_signed_error: float
    empty: bool = False


def blau_quintile_bias(mdf, cef, categories: QueryGroup, units=None) -> tuple[list[QuintileRow], list[str]]:
    """Mean signed TOTAL error per quintile of the confidential Blau index.

    Quintile edges use lower interpolation and a unit sitting on an edge goes to
    the lower quintile. Units with zero population are skipped and returned.
    """
    units = _aligned(mdf, cef, units)
    flagged, idx, err = [], [], []
    for u in units:
        counts = np.asarray(categories.matrix @ np.asarray(cef[u], np.int64))
        if counts.sum() == 0:
            flagged.append(u)
            continue
        idx.append(blau_index(counts))
        err.append(int(np.sum(mdf[u])) - int(np.sum(cef[u])))
    if len(idx) < 5:
        raise ValueError("need at least five populated units for quintiles")
    idx_arr = np.array(idx)
    edges = np.quantile(idx_arr, [0.2, 0.4, 0.6, 0.8], method="lower")
    bucket = np.searchsorted(edges, idx_arr, side="left")
    err_arr = np.array(err, dtype=float)
    rows = []
    for qn in range(5):
        sel = bucket == qn
        if not sel.any():
            rows.append(QuintileRow(qn + 1, 0, float("nan"), empty=True))
        else:
            rows.append(QuintileRow(qn + 1, int(sel.sum()), float(err_arr[sel].mean())))
    return rows, flagged


@dataclass(frozen=True)
class CriterionResult:
    fraction: float
    passed: bool
    evaluated: int
    failures: tuple[str, ...] = ()
    flagged: tuple[str, ...] = ()


def largest_group_criterion(mdf, cef, categories: QueryGroup, units=None, threshold: float = 0.05,
                            min_pop: int = 500, required: float = 0.95) -> CriterionResult:
    """Share of entities whose largest group's population share moves by at most ``threshold``."""
    units = _aligned(mdf, cef, units)
    ok, failures, flagged = 0, [], []
    evaluated = 0
    for u in units:
        conf = np.asarray(categories.matrix @ np.asarray(cef[u], np.int64))
        pop = int(np.sum(cef[u]))
        if pop < min_pop or pop == 0:
            continue
        evaluated += 1
        prot_pop = int(np.sum(mdf[u]))
        if prot_pop == 0:
            failures.append(u)
            flagged.append(u)
            continue
        g = int(np.argmax(conf))
        prot = np.asarray(categories.matrix @ np.asarray(mdf[u], np.int64))
        change = abs(prot[g] / prot_pop - conf[g] / pop)
        if change <= threshold + 1e-12:
            ok += 1
        else:
            failures.append(u)
    frac = ok / evaluated if evaluated else 1.0
    return CriterionResult(frac, frac >= required, evaluated, tuple(failures), tuple(flagged))


@dataclass
class MetricReport:
    rows: list[tuple[str, str, str, float]] = field(default_factory=list)

    def add(self, geo: str, query: str, metric: str, value: float):
        self.rows.append((geo, query, metric, float(value)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["geography", "query", "metric", "value"])
        for r in self.rows:
            w.writerow([r[0], r[1], r[2], repr(r[3])])
        return buf.getvalue()

    def to_text(self) -> str:
        if not self.rows:
            return "(no metrics)\n"
        widths = [max(len(str(r[i])) for r in self.rows + [("geography", "query", "metric", 0)]) for i in range(3)]
        head = f"{'geography':<{widths[0]}}  {'query':<{widths[1]}}  {'metric':<{widths[2]}}  {'value':>12}"
        lines = [head, "-" * len(head)]
        for g, q, m, v in self.rows:
            lines.append(f"{g:<{widths[0]}}  {q:<{widths[1]}}  {m:<{widths[2]}}  {v:>12.4f}")
        return "\n".join(lines) + "\n"

"""CSV readers and writers for microdata, measurements and entity lists."""

from __future__ import annotations

import csv
from fractions import Fraction
from typing import Iterable, Mapping

import numpy as np

from .privacy import NoisyMeasurement
from .schema import Schema, SchemaError
from .spine import OffSpineEntity, Spine


class DataError(ValueError):
    pass


def read_microdata(path, schema: Schema, spine: Spine) -> dict[str, np.ndarray]:
    """Tabulate a one-row-per-record CSV into per-leaf histograms (empty leaves get zeros)."""
    leaves = set(spine.leaves())
    hists = {l: np.zeros(schema.size, dtype=np.int64) for l in spine.leaves()}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["geocode", *schema.names]
        if header != expected:
            raise DataError(f"{path}: header {header} does not match {expected}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            geo = row[0]
            if geo not in leaves:
                raise DataError(f"{path}:{lineno}: geocode {geo!r} is not a leaf of the spine")
            try:
                hists[geo][schema.cell_of_labels(row[1:])] += 1
            except (SchemaError, IndexError) as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
    return hists


def write_records(path, records: Iterable[tuple[str, ...]], schema: Schema) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["geocode", *schema.names])
        w.writerows(records)


def hist_records(hists: Mapping[str, np.ndarray], schema: Schema):
    for leaf in sorted(hists):
        x = hists[leaf]
        for cell in np.flatnonzero(x):
            labels = schema.labels_of_cell(int(cell))
            for _ in range(int(x[cell])):
                yield (leaf,) + labels


def write_measurements(path, measurements: Mapping[tuple[str, str], NoisyMeasurement]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "group", "row", "value", "sigma2_num", "sigma2_den"])
        for key in sorted(measurements):
            m = measurements[key]
            for i, v in enumerate(m.values):
                w.writerow([m.node, m.group, i, int(v), m.sigma2.numerator, m.sigma2.denominator])


def read_measurements(path) -> dict[tuple[str, str], NoisyMeasurement]:
    rows: dict[tuple[str, str], list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            key = (r["node"], r["group"])
            rows.setdefault(key, []).append((int(r["row"]), int(r["value"]),
                                             Fraction(int(r["sigma2_num"]), int(r["sigma2_den"]))))
    out = {}
    for key, items in rows.items():
        items.sort()
        out[key] = NoisyMeasurement(key[0], key[1], np.array([v for _, v, _ in items], dtype=np.int64), items[0][2])
    return out


def read_entities(path) -> list[OffSpineEntity]:
    """``name,leaf`` rows, one per member leaf."""
    members: dict[str, set[str]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            members.setdefault(r["name"].strip(), set()).add(r["leaf"].strip())
    return [OffSpineEntity(n, frozenset(v)) for n, v in members.items()]

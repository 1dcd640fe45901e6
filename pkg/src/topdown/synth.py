"""Deterministic synthetic microdata consistent with a spine's payloads."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .constraints import InvariantSpec, StructuralZeroSet
from .schema import Schema
from .spine import Spine


class SynthesisError(ValueError):
    pass


def cell_weights(schema: Schema, weights: Mapping[str, Sequence[float]] | None = None) -> np.ndarray:
    """Independent per-attribute mixture over all cells (uniform where unspecified)."""
    w = np.ones(1)
    for attr in schema.attributes:
        a = np.asarray((weights or {}).get(attr.name, np.ones(len(attr))), dtype=float)
        if a.shape != (len(attr),) or np.any(a < 0):
            raise SynthesisError(f"bad weights for {attr.name!r}")
        w = np.kron(w, a)
    return w


def synthesize(schema: Schema, spine: Spine, seed: int, leaf_mean: float = 20.0,
               weights: Mapping[str, Sequence[float]] | None = None,
               invariants: InvariantSpec = InvariantSpec(),
               zeros: StructuralZeroSet = StructuralZeroSet(), gq_extra: float = 0.0) -> dict[str, np.ndarray]:
    """Per-leaf histograms: Poisson household population plus 1 + Poisson(gq_extra) per GQ facility.

    Structural zeros are never populated, GQ cells are used only where a
    facility of that type exists, and householder cells are capped at the
    leaf's housing units by moving the excess to other household cells.
    """
    rng = np.random.default_rng(seed)
    base = cell_weights(schema, weights)
    forbidden = zeros.mask(schema)
    gq_types: tuple[str, ...] = ()
    household = np.ones(schema.size, dtype=bool)
    if invariants.gq_attribute:
        gq_types = invariants.resolved_gq_types(schema)
        household = ~schema.cell_mask({invariants.gq_attribute: gq_types})
    hh_mask = schema.cell_mask(invariants.householder) if invariants.householder else np.zeros(schema.size, bool)

    out = {}
    for leaf in spine.leaves():
        node = spine[leaf]
        x = np.zeros(schema.size, dtype=np.int64)
        w = base * (household & ~forbidden)
        n = int(rng.poisson(leaf_mean)) if leaf_mean > 0 else 0
        if n:
            if w.sum() <= 0:
                raise SynthesisError("no household cell is allowed by the structural zeros")
            x += rng.multinomial(n, w / w.sum())
        if hh_mask.any():
            excess = int(x[hh_mask].sum()) - node.housing_units
            other = household & ~forbidden & ~hh_mask
            if excess > 0:
                if not other.any():
                    raise SynthesisError(f"leaf {leaf!r}: householders exceed housing units")
                take = rng.multivariate_hypergeometric(x[hh_mask], excess)
                x[hh_mask] -= take
                wo = base * other
                x += rng.multinomial(excess, wo / wo.sum())
        for gq_type, k in node.occupied_gq.items():
            if gq_type not in gq_types:
                raise SynthesisError(f"leaf {leaf!r} declares unknown GQ type {gq_type!r}")
            mask = schema.cell_mask({invariants.gq_attribute: [gq_type]}) & ~forbidden
            if not mask.any():
                raise SynthesisError(f"GQ type {gq_type!r} has no admissible cells")
            wg = base * mask
            if wg.sum() <= 0:
                wg = mask.astype(float)
            people = k + (int(rng.poisson(gq_extra * k)) if gq_extra > 0 else 0)
            x += rng.multinomial(people, wg / wg.sum())
        out[leaf] = x
    return out

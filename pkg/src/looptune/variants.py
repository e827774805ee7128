"""Candidate code variants of the GEMM nest: two-level tiling plus interchange.

A variant is identified by a permutation of the outer tile loops and six tile
sizes (three dimensions, two levels).  The generated nest has up to nine
loops - two tile levels plus the point loops - with residue handled by
clamped min() upper bounds, and its interpretation matches the original nest
up to floating-point reassociation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from .ir import AffineExpr, Loop, LoopNest, is_canonical_gemm
from .reuse import (
    CacheHierarchy,
    WorkingSetProfile,
    analyze_structure,
    classify,
    compute_dependences,
    working_set,
)

DIMS = ("i", "j", "k")
ALL_ORDERS = tuple(itertools.permutations(DIMS))


@dataclass(frozen=True)
class VariantDescriptor:
    """Loop order of the tile loops plus (T1_i, T1_j, T1_k, T2_i, T2_j, T2_k)."""

    order: tuple[str, str, str]
    tiles: tuple[int, int, int, int, int, int]

    def __post_init__(self):
        if tuple(sorted(self.order)) != DIMS:
            raise ValueError(f"order must permute {DIMS}, got {self.order}")
        if len(self.tiles) != 6 or any(t < 1 for t in self.tiles):
            raise ValueError(f"need six positive tile sizes, got {self.tiles}")

    @property
    def level1(self) -> dict[str, int]:
        return dict(zip(DIMS, self.tiles[:3]))

    @property
    def level2(self) -> dict[str, int]:
        return dict(zip(DIMS, self.tiles[3:]))

    @property
    def vid(self) -> str:
        return "-".join(self.order) + "_" + "x".join(str(t) for t in self.tiles)


@dataclass(frozen=True)
class SearchSpace:
    """Candidate tile values per dimension per level, and allowed loop orders.

    `nested_only` restricts the cross product to combinations whose level-2
    tile does not exceed the level-1 tile in any dimension (the default
    space's convention); without it every combination is a legal descriptor
    since the generated nest clamps the level-2 block anyway.
    """

    level1: dict[str, tuple[int, ...]]
    level2: dict[str, tuple[int, ...]]
    orders: tuple[tuple[str, str, str], ...]
    nested_only: bool = False

    def __post_init__(self):
        for level in (self.level1, self.level2):
            for d in DIMS:
                if not level.get(d):
                    raise ValueError(f"empty tile candidate list for dimension {d}")
                if any(t < 1 for t in level[d]):
                    raise ValueError(f"tile sizes must be positive: {level[d]}")
        if not self.orders:
            raise ValueError("need at least one loop order")


def default_search_space() -> SearchSpace:
    """Tiles from {16, 32, 64, 128, 256} per dimension, level-2 <= level-1,
    all six orders of the outer tile loops."""
    candidates = (16, 32, 64, 128, 256)
    return SearchSpace(
        level1={d: candidates for d in DIMS},
        level2={d: candidates for d in DIMS},
        orders=ALL_ORDERS,
        nested_only=True,
    )


def _extent_exprs(nest: LoopNest) -> dict[str, tuple[AffineExpr, ...]]:
    return {l.iterator: l.upper for l in nest.loops}


def build_tiled_nest(nest: LoopNest, desc: VariantDescriptor) -> LoopNest:
    """Two-level tiled and interchanged form of the canonical GEMM nest.

    Tile loops step by their tile size; point loops run [t2, min(t2+T2,
    t1+T1, extent)) so non-dividing tiles clamp instead of splitting the nest.
    Point loops keep the canonical i, j, k order for the microkernel.
    """
    extents = _extent_exprs(nest)
    t1 = desc.level1
    t2 = desc.level2
    loops = []
    for d in desc.order:
        loops.append(Loop(f"{d}t1", AffineExpr.constant(0), extents[d], step=t1[d]))
    for d in desc.order:
        loops.append(Loop(
            f"{d}t2", AffineExpr.var(f"{d}t1"),
            (AffineExpr.var(f"{d}t1", const=t1[d]),) + extents[d],
            step=t2[d],
        ))
    for loop in nest.loops:
        d = loop.iterator
        loops.append(Loop(
            d, AffineExpr.var(f"{d}t2"),
            (AffineExpr.var(f"{d}t2", const=t2[d]),
             AffineExpr.var(f"{d}t1", const=t1[d])) + extents[d],
            step=1,
        ))
    return LoopNest(loops=tuple(loops), refs=nest.refs, op=nest.op,
                    params=nest.params)


def interchange(nest: LoopNest, order: tuple[str, str, str]) -> LoopNest:
    """Reorder the loops of an untiled rectangular nest."""
    by_name = {l.iterator: l for l in nest.loops}
    if set(order) != set(by_name):
        raise ValueError(f"order {order} does not match loops {tuple(by_name)}")
    for loop in nest.loops:
        used = loop.lower.variables() | {v for e in loop.upper for v in e.variables()}
        if used & set(by_name):
            raise ValueError("cannot interchange loops with iterator-dependent bounds")
    return LoopNest(loops=tuple(by_name[d] for d in order), refs=nest.refs,
                    op=nest.op, params=nest.params)


def generate_variants(nest: LoopNest,
                      space: SearchSpace) -> list[tuple[VariantDescriptor, LoopNest]]:
    """Cross product of orders and tile choices, deduplicated by nest identity."""
    if not is_canonical_gemm(nest):
        raise ValueError("variant generation requires the canonical GEMM nest")
    out = []
    seen: set[LoopNest] = set()
    for order in space.orders:
        for t1 in itertools.product(*(space.level1[d] for d in DIMS)):
            for t2 in itertools.product(*(space.level2[d] for d in DIMS)):
                if space.nested_only and any(b > a for a, b in zip(t1, t2)):
                    continue
                desc = VariantDescriptor(order=tuple(order), tiles=t1 + t2)
                tiled = build_tiled_nest(nest, desc)
                if tiled in seen:
                    continue
                seen.add(tiled)
                out.append((desc, tiled))
    if not out:
        raise ValueError("search space produced no variants")
    return out


def featurize(variant: VariantDescriptor, nest: LoopNest, cache: CacheHierarchy,
              tiled: LoopNest | None = None) -> WorkingSetProfile:
    """Working-set profile of one variant - the ranker's feature vector."""
    if tiled is None:
        tiled = build_tiled_nest(nest, variant)
    structure = analyze_structure(tiled)
    records = []
    for dep in compute_dependences(tiled, structure=structure):
        if dep.is_empty:
            continue
        records.append(working_set(tiled, dep, structure=structure))
    return classify(records, cache)


def variant_rows(variants, profiles) -> list[dict]:
    """JSON-ready rows (descriptor + feature vector) for logs and the ranker."""
    rows = []
    for (desc, _), profile in zip(variants, profiles):
        rows.append({
            "id": desc.vid,
            "order": list(desc.order),
            "tiles": list(desc.tiles),
            "slots": list(profile.slot_names),
            "features": list(profile.features()),
        })
    return rows

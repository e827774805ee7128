"""Cache data-reuse analysis: dependences, working sets, cache classification.

Every data dependence of a nest is an instance of data reuse.  For a reuse to
be realizable in a given cache level, all data touched between the source and
target iterations (the working set) must fit there.  This module computes the
dependences of GEMM-family nests, the minimum/maximum working-set size of each
dependence, and assigns each reuse to the fastest cache level that can hold it.

Two independent routes compute working-set sizes:

* `working_set` - the production path.  It decomposes the lexicographic
  iteration interval between source and target into disjoint slabs, maps each
  slab to an axis-aligned box of statement instances, projects the boxes
  through the array access functions, and counts the exact union-of-rectangles
  cardinality per array.  No per-iteration enumeration; cost is independent of
  problem size.

* `working_set_oracle` - the ground-truth path.  Plain enumeration of every
  iteration in the interval, applying every access relation and counting
  distinct elements.  Slow and dumb on purpose; the tests hold `working_set`
  to exact agreement with it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .ir import (
    DEFAULT_ENUMERATION_CAP,
    AffineExpr,
    ArrayRef,
    EnumerationCapError,
    LoopNest,
    iter_iterations,
)

RAR = "RAR"
RAW = "RAW"
WAR = "WAR"
WAW = "WAW"
DEPENDENCE_KINDS = (RAR, RAW, WAR, WAW)


class UnsupportedNestError(Exception):
    """The nest falls outside the affine family this analysis supports."""


class EmptyDependenceError(Exception):
    """The dependence relation has no (source, target) instances."""


@dataclass(frozen=True)
class DependenceRelation:
    """A typed source-to-target map over statement instances for one array.

    The relation is expressed on the point coordinates (the innermost loops the
    array subscripts use), which identify a statement instance regardless of
    how the surrounding nest is tiled or interchanged: targets agree with the
    source on `equal_dims` and take any strictly larger value of `free_dim`.
    """

    kind: str
    array: str
    source_ref: ArrayRef
    target_ref: ArrayRef
    equal_dims: tuple[str, ...]
    free_dim: str
    free_extent: int
    carrying_loop: int
    constraint: str

    @property
    def is_empty(self) -> bool:
        return self.free_extent < 2


@dataclass(frozen=True)
class WorkingSetRecord:
    dependence: DependenceRelation
    ws_min: int
    ws_max: int
    per_array: tuple[tuple[str, int], ...]

    def __post_init__(self):
        if not (0 < self.ws_min <= self.ws_max):
            raise ValueError(f"bad working-set sizes {self.ws_min}, {self.ws_max}")


@dataclass(frozen=True)
class CacheLevel:
    name: str
    capacity_bytes: int


@dataclass(frozen=True)
class CacheHierarchy:
    """Ordered cache levels, fastest first; fully associative and exclusive."""

    levels: tuple[CacheLevel, ...]
    element_bytes: int = 4

    def __post_init__(self):
        if not self.levels:
            raise ValueError("cache hierarchy needs at least one level")
        caps = [l.capacity_bytes for l in self.levels]
        if any(b <= a for a, b in zip(caps, caps[1:])):
            raise ValueError(f"capacities must strictly increase outward: {caps}")
        if self.element_bytes < 1:
            raise ValueError("element size must be positive")

    @property
    def slot_names(self) -> tuple[str, ...]:
        return tuple(l.name for l in self.levels) + ("memory",)


@dataclass(frozen=True)
class WorkingSetProfile:
    """Cumulative working-set sizes (elements) per cache level plus memory.

    `levels` assigns each record's ws_max to the fastest level that holds it;
    `min_levels` does the same with ws_min.  Both are kept because the ranker
    is free to use either aggregate as a feature.
    """

    slot_names: tuple[str, ...]
    levels: tuple[int, ...]
    min_levels: tuple[int, ...]

    def features(self) -> tuple[float, ...]:
        return tuple(float(x) for x in self.levels + self.min_levels)


def default_cache_hierarchy() -> CacheHierarchy:
    """32 KB L1, 1 MB L2, 39 MB L3 with 4-byte elements."""
    return CacheHierarchy(
        levels=(
            CacheLevel("L1", 32 * 1024),
            CacheLevel("L2", 1024 * 1024),
            CacheLevel("L3", 39 * 1024 * 1024),
        ),
        element_bytes=4,
    )


# ---------------------------------------------------------------------------
# Structural view of a supported nest

@dataclass(frozen=True)
class NestStructure:
    """Validated decomposition of a GEMM-family nest into per-dimension chains.

    dims: point iterators in loop order.  chains[d]: loop depths from the
    outermost tile loop of d down to its point loop.  Each point coordinate of
    a statement instance determines its tile coordinates uniquely, so instance
    space maps bijectively onto the box prod_d [lower_d, lower_d + extent_d).
    """

    nest: LoopNest
    dims: tuple[str, ...]
    chains: tuple[tuple[int, ...], ...]
    lowers: tuple[int, ...]
    extents: tuple[int, ...]
    ref_exprs: tuple[tuple[str, tuple[AffineExpr, ...]], ...]

    def dim_index(self, dim: str) -> int:
        return self.dims.index(dim)

    def point_depth(self, dim: str) -> int:
        return self.chains[self.dim_index(dim)][-1]


def analyze_structure(nest: LoopNest) -> NestStructure:
    """Validate nest membership in the supported family and extract chains.

    Supported family: subscripts are single point iterators (coefficient 1,
    optional constant offset) or constants; point loops step by 1; tile loops
    chain through lower bounds (lower = parent iterator, root lower constant);
    upper bounds involve only same-chain ancestors and parameters; all refs to
    one array share identical subscripts.
    """
    params = nest.param_env
    by_name = {l.iterator: d for d, l in enumerate(nest.loops)}

    point_dims: list[str] = []
    for ref in nest.refs:
        for expr in ref.indices:
            if expr.is_constant:
                continue
            sv = expr.single_var()
            if sv is None:
                raise UnsupportedNestError(
                    f"ref {ref.array}: subscript {expr} is not a single iterator"
                )
            name = sv[0]
            if name in params:
                raise UnsupportedNestError(
                    f"ref {ref.array}: subscript uses parameter {name}"
                )
            if name not in by_name:
                raise UnsupportedNestError(f"ref {ref.array}: unknown iterator {name}")
            if name not in point_dims:
                point_dims.append(name)
    if not point_dims:
        raise UnsupportedNestError("no iterator appears in any subscript")

    # Chains: follow lower bounds upward from each point loop.
    parent_of: dict[str, str | None] = {}
    for loop in nest.loops:
        if loop.lower.is_constant:
            parent_of[loop.iterator] = None
        else:
            sv = loop.lower.single_var()
            if sv is None or sv[1] != 0 or sv[0] in params:
                raise UnsupportedNestError(
                    f"loop {loop.iterator}: lower bound {loop.lower} is not a tile parent"
                )
            parent_of[loop.iterator] = sv[0]

    dims = tuple(sorted(point_dims, key=lambda n: by_name[n]))
    chains = []
    claimed: set[str] = set()
    for d in dims:
        loop = nest.loops[by_name[d]]
        if loop.step != 1:
            raise UnsupportedNestError(f"point loop {d}: step must be 1")
        chain = [d]
        cur = d
        while parent_of[cur] is not None:
            cur = parent_of[cur]
            if cur not in by_name:
                raise UnsupportedNestError(f"loop {chain[-1]}: unknown parent {cur}")
            chain.append(cur)
        chain.reverse()
        depths = tuple(by_name[n] for n in chain)
        if list(depths) != sorted(depths):
            raise UnsupportedNestError(f"chain for {d} is not outermost-first: {chain}")
        claimed.update(chain)
        chains.append(depths)
    if claimed != set(by_name):
        raise UnsupportedNestError(
            f"loops outside any dimension chain: {sorted(set(by_name) - claimed)}"
        )

    lowers, extents = [], []
    for d, depths in zip(dims, chains):
        root = nest.loops[depths[0]]
        lo = root.lower.evaluate(params)
        hi = min(e.evaluate(params) for e in root.upper)
        if hi <= lo:
            raise UnsupportedNestError(f"dimension {d}: empty extent")
        ancestors: set[str] = set(params)
        for depth in depths:
            loop = nest.loops[depth]
            for e in loop.upper:
                if not e.variables() <= ancestors:
                    raise UnsupportedNestError(
                        f"loop {loop.iterator}: upper bound {e} uses non-chain iterators"
                    )
            ancestors.add(loop.iterator)
        lowers.append(lo)
        extents.append(hi - lo)

    groups: dict[str, tuple[AffineExpr, ...]] = {}
    order: list[str] = []
    for ref in nest.refs:
        if ref.array not in groups:
            groups[ref.array] = ref.indices
            order.append(ref.array)
        elif groups[ref.array] != ref.indices:
            raise UnsupportedNestError(
                f"array {ref.array}: refs with differing subscripts"
            )
    ref_exprs = tuple((a, groups[a]) for a in order)

    return NestStructure(nest=nest, dims=dims, chains=tuple(chains),
                         lowers=tuple(lowers), extents=tuple(extents),
                         ref_exprs=ref_exprs)


# ---------------------------------------------------------------------------
# Dependences

def _extent_display(structure: NestStructure, dim: str) -> str:
    root = structure.nest.loops[structure.chains[structure.dim_index(dim)][0]]
    if len(root.upper) == 1:
        sv = root.upper[0].single_var()
        if sv is not None and sv[1] == 0:
            return sv[0]
    return str(structure.lowers[structure.dim_index(dim)]
               + structure.extents[structure.dim_index(dim)])


def _schedule_vector(structure: NestStructure,
                     point: tuple[int, ...]) -> tuple[int, ...]:
    """Full iteration vector executing statement instance `point`."""
    nest = structure.nest
    vec = [0] * len(nest.loops)
    for di, depths in enumerate(structure.chains):
        x = point[di]
        base = structure.lowers[di]
        for depth in depths[:-1]:
            step = nest.loops[depth].step
            v = base + ((x - base) // step) * step
            vec[depth] = v
            base = v
        vec[depths[-1]] = x
    return tuple(vec)


def compute_dependences(nest: LoopNest,
                        structure: NestStructure | None = None
                        ) -> list[DependenceRelation]:
    """All reuse relations of the nest, one per (array reuse class, kind).

    For canonical GEMM this yields the C reuse carried by k in all four kinds
    plus the RAR reuses of A (carried by j) and B (carried by i).
    """
    if structure is None:
        structure = analyze_structure(nest)
    relations: list[DependenceRelation] = []
    refs_by_array: dict[str, list[ArrayRef]] = {}
    for ref in nest.refs:
        refs_by_array.setdefault(ref.array, []).append(ref)

    for array, exprs in structure.ref_exprs:
        used: list[str] = []
        for e in exprs:
            sv = e.single_var()
            if sv is not None and sv[0] not in used:
                used.append(sv[0])
        free = [d for d in structure.dims if d not in used]
        if not free:
            continue
        if len(free) > 1:
            raise UnsupportedNestError(
                f"array {array}: reuse spans {len(free)} free dimensions; "
                "only single-dimension reuse is supported"
            )
        f = free[0]
        fi = structure.dim_index(f)
        extent = structure.extents[fi]
        refs = refs_by_array[array]
        readers = [r for r in refs if r.reads]
        writers = [r for r in refs if r.writes]

        equal_dims = tuple(d for d in structure.dims if d in used)
        inst = "[" + ", ".join(structure.dims) + "]"
        tgt = "[" + ", ".join(d + "'" for d in structure.dims) + "]"
        conds = [f"{d}' = {d}" for d in equal_dims]
        conds.append(f"{f} < {f}' < {_extent_display(structure, f)}")
        constraint = f"{{ S{inst} -> S{tgt} : " + " and ".join(conds) + " }"

        carrying = structure.point_depth(f)
        if extent >= 2:
            origin = tuple(structure.lowers)
            first = tuple(v + (1 if i == fi else 0) for i, v in enumerate(origin))
            sv_src = _schedule_vector(structure, origin)
            sv_tgt = _schedule_vector(structure, first)
            carrying = next(d for d in range(len(sv_src)) if sv_src[d] != sv_tgt[d])

        for kind, src_pool, tgt_pool in ((RAR, readers, readers),
                                         (RAW, writers, readers),
                                         (WAR, readers, writers),
                                         (WAW, writers, writers)):
            if not src_pool or not tgt_pool:
                continue
            relations.append(DependenceRelation(
                kind=kind, array=array,
                source_ref=src_pool[0], target_ref=tgt_pool[0],
                equal_dims=equal_dims, free_dim=f, free_extent=extent,
                carrying_loop=carrying, constraint=constraint,
            ))
    return relations


# ---------------------------------------------------------------------------
# Interval decomposition: closed lexicographic interval -> disjoint slabs

def _interval_slabs(nest: LoopNest, sv: tuple[int, ...], tv: tuple[int, ...]):
    """Decompose {x : sv <=lex x <=lex tv} into disjoint slabs.

    A slab is (fixed_prefix, ranged) where loops [0, len(fixed_prefix)) take
    the prefix values, the next loop (if ranged is not None) ranges over the
    half-open value interval, and all deeper loops run their full ranges.
    """
    depth = len(nest.loops)
    params = nest.param_env
    if sv == tv:
        return [(sv, None)]
    c = next(d for d in range(depth) if sv[d] != tv[d])
    if sv[c] > tv[c]:
        raise ValueError(f"source {sv} is not lexicographically <= target {tv}")
    slabs = []

    # x[:c] = sv[:c], x[c] = sv[c], suffix >=lex sv[c+1:]
    for p in range(c + 1, depth):
        env = dict(params)
        for d in range(p):
            env[nest.loops[d].iterator] = sv[d]
        _, ub = nest.loops[p].bounds(env)
        lo = sv[p] + nest.loops[p].step
        if lo < ub:
            slabs.append((sv[:p], (lo, ub)))
    slabs.append((sv, None))

    # x[:c] = sv[:c], sv[c] < x[c] < tv[c], suffix free
    if sv[c] + nest.loops[c].step < tv[c]:
        slabs.append((sv[:c], (sv[c] + nest.loops[c].step, tv[c])))

    # x[:c] = tv[:c], x[c] = tv[c], suffix <=lex tv[c+1:]
    for p in range(c + 1, depth):
        env = dict(params)
        for d in range(p):
            env[nest.loops[d].iterator] = tv[d]
        lb, _ = nest.loops[p].bounds(env)
        if lb < tv[p]:
            slabs.append((tv[:p], (lb, tv[p])))
    slabs.append((tv, None))
    return slabs


def _slab_box(structure: NestStructure, fixed: tuple[int, ...],
              ranged: tuple[int, int] | None) -> list[tuple[int, int]]:
    """Point-coordinate box [lo, hi) per dimension covered by one slab.

    Walking a dimension's chain outermost-in: a fixed tile iterator narrows the
    block to [v, v + step); the ranged loop narrows it to its value interval
    (consecutive tile blocks are contiguous, so their union is one interval);
    free loops sweep whatever block remains.
    """
    nfix = len(fixed)
    box = []
    for di, depths in enumerate(structure.chains):
        lo = structure.lowers[di]
        hi = lo + structure.extents[di]
        for depth in depths:
            if depth < nfix:
                v = fixed[depth]
                lo = v
                hi = min(v + structure.nest.loops[depth].step, hi)
            elif ranged is not None and depth == nfix:
                a, b = ranged
                lo = a
                hi = min(b, hi)
                break
            else:
                break
        box.append((lo, hi))
    return box


def _union_cardinality(rects: list[tuple[tuple[int, int], ...]]) -> int:
    """Exact |union| of axis-aligned integer rectangles via coordinate compression."""
    rects = [r for r in rects if all(lo < hi for lo, hi in r)]
    if not rects:
        return 0
    rank = len(rects[0])
    cuts = [np.array(sorted({v for r in rects for v in r[d]})) for d in range(rank)]
    grid = np.zeros([len(c) - 1 for c in cuts], dtype=bool)
    for r in rects:
        sl = tuple(
            slice(int(np.searchsorted(cuts[d], r[d][0])),
                  int(np.searchsorted(cuts[d], r[d][1])))
            for d in range(rank)
        )
        grid[sl] = True
    vol = np.ones_like(grid, dtype=np.int64)
    for d in range(rank):
        widths = np.diff(cuts[d]).astype(np.int64)
        shape = [1] * rank
        shape[d] = len(widths)
        vol = vol * widths.reshape(shape)
    return int(vol[grid].sum())


def _count_interval(structure: NestStructure, src_pt: tuple[int, ...],
                    tgt_pt: tuple[int, ...]) -> tuple[int, dict[str, int]]:
    """Distinct elements per array touched in the closed interval [src, tgt]."""
    sv = _schedule_vector(structure, src_pt)
    tv = _schedule_vector(structure, tgt_pt)
    slabs = _interval_slabs(structure.nest, sv, tv)
    boxes = [_slab_box(structure, fixed, ranged) for fixed, ranged in slabs]
    params = structure.nest.param_env

    breakdown: dict[str, int] = {}
    for array, exprs in structure.ref_exprs:
        rects = []
        for box in boxes:
            rect = []
            for e in exprs:
                if e.is_constant:
                    v = e.const
                    rect.append((v, v + 1))
                else:
                    sv_ = e.single_var()
                    if sv_ is not None and sv_[0] in params:
                        v = e.evaluate(params)
                        rect.append((v, v + 1))
                    else:
                        name, off = sv_
                        lo, hi = box[structure.dim_index(name)]
                        rect.append((lo + off, hi + off))
            rects.append(tuple(rect))
        breakdown[array] = _union_cardinality(rects)
    return sum(breakdown.values()), breakdown


def working_set(nest: LoopNest, dep: DependenceRelation,
                structure: NestStructure | None = None) -> WorkingSetRecord:
    """Min and max working-set sizes of one dependence, in array elements.

    ws_min counts distinct elements touched between the lexicographically
    first source and its first target (both included); ws_max likewise up to
    the last target.
    """
    if structure is None:
        structure = analyze_structure(nest)
    if dep.is_empty:
        raise EmptyDependenceError(
            f"dependence on {dep.array} via {dep.free_dim} has no instances"
        )
    fi = structure.dim_index(dep.free_dim)
    origin = tuple(structure.lowers)
    first = tuple(v + (1 if i == fi else 0) for i, v in enumerate(origin))
    last = tuple(v + (structure.extents[fi] - 1 if i == fi else 0)
                 for i, v in enumerate(origin))
    ws_min, _ = _count_interval(structure, origin, first)
    ws_max, breakdown = _count_interval(structure, origin, last)
    return WorkingSetRecord(
        dependence=dep, ws_min=ws_min, ws_max=ws_max,
        per_array=tuple(sorted(breakdown.items())),
    )


def working_set_records(nest: LoopNest) -> list[WorkingSetRecord]:
    """Working sets for every non-empty dependence of the nest."""
    structure = analyze_structure(nest)
    records = []
    for dep in compute_dependences(nest, structure=structure):
        if dep.is_empty:
            continue
        records.append(working_set(nest, dep, structure=structure))
    return records


# ---------------------------------------------------------------------------
# Ground-truth oracle

def working_set_oracle(nest: LoopNest, source: tuple[int, ...],
                       target: tuple[int, ...],
                       cap: int = DEFAULT_ENUMERATION_CAP) -> int:
    """Brute-force distinct-element count over the closed interval [source, target].

    `source` and `target` are statement instances given as point coordinates
    (the iterators appearing in subscripts, in loop order).  Enumerates every
    iteration between them in execution order and applies every access
    relation; this is the ground truth the analytical path is tested against.
    """
    point_names: list[str] = []
    for ref in nest.refs:
        for e in ref.indices:
            for name, _ in e.terms:
                if name not in nest.param_env and name not in point_names:
                    point_names.append(name)
    by_name = {l.iterator: d for d, l in enumerate(nest.loops)}
    point_names.sort(key=lambda n: by_name[n])
    positions = [by_name[n] for n in point_names]
    if len(source) != len(positions) or len(target) != len(positions):
        raise ValueError(f"instances must have {len(positions)} coordinates")

    params = nest.param_env
    seen: set[tuple[str, tuple[int, ...]]] = set()
    started = False
    steps = 0
    for vec in iter_iterations(nest):
        pt = tuple(vec[p] for p in positions)
        if not started:
            if pt == target and pt != source:
                raise ValueError("target executes before source")
            if pt != source:
                continue
            started = True
        steps += 1
        if steps > cap:
            raise EnumerationCapError(f"interval exceeds enumeration cap {cap}")
        env = dict(params)
        for d, loop in enumerate(nest.loops):
            env[loop.iterator] = vec[d]
        for ref in nest.refs:
            idx = tuple(e.evaluate(env) for e in ref.indices)
            seen.add((ref.array, idx))
        if pt == target:
            return len(seen)
    if not started:
        raise ValueError(f"source instance {source} never executes")
    raise ValueError(f"target instance {target} never executes after source")


# ---------------------------------------------------------------------------
# Cache-level classification

def classify(records: list[WorkingSetRecord],
             cache: CacheHierarchy) -> WorkingSetProfile:
    """Assign each working set to the fastest cache level that can hold it.

    A record lands in the first level whose capacity is at least its size in
    bytes; records fitting nowhere land in the memory slot.  Slot values are
    sums of the assigned sizes in elements.
    """
    nslots = len(cache.levels) + 1
    max_sums = [0] * nslots
    min_sums = [0] * nslots

    def slot_for(count: int) -> int:
        size = count * cache.element_bytes
        for idx, level in enumerate(cache.levels):
            if size <= level.capacity_bytes:
                return idx
        return nslots - 1

    for rec in records:
        max_sums[slot_for(rec.ws_max)] += rec.ws_max
        min_sums[slot_for(rec.ws_min)] += rec.ws_min
    return WorkingSetProfile(slot_names=cache.slot_names,
                             levels=tuple(max_sums), min_levels=tuple(min_sums))


# ---------------------------------------------------------------------------
# Symbolic closed forms for the canonical-order GEMM nest

@dataclass(frozen=True)
class SymbolicWorkingSet:
    array: str
    carried_by: str
    ws_min_formula: str
    ws_max_formula: str

    def ws_min(self, M: int, N: int, K: int) -> int:
        return _eval_formula(self.ws_min_formula, M, N, K)

    def ws_max(self, M: int, N: int, K: int) -> int:
        return _eval_formula(self.ws_max_formula, M, N, K)


def _eval_formula(formula: str, M: int, N: int, K: int) -> int:
    # Formulas use implicit products in the usual math style ("2K + 3").
    expr = re.sub(r"(\d)\s*([MNK])", r"\1*\2", formula)
    return int(eval(expr, {"__builtins__": {}}, {"M": M, "N": N, "K": K}))


def canonical_gemm_formulas() -> dict[str, SymbolicWorkingSet]:
    """Closed-form working-set sizes per reuse of the canonical i/j/k nest.

    Valid whenever the corresponding dependence is non-empty (K >= 2 for the
    C reuse, N >= 2 for A, M >= 2 for B).
    """
    return {
        "C": SymbolicWorkingSet("C", "k", "5", "2K + 1"),
        "A": SymbolicWorkingSet("A", "j", "2K + 3", "N*K + N + 1"),
        "B": SymbolicWorkingSet("B", "i", "N*K + N + K + 2",
                                "N*K + (M - 1)*(N + K) + 2"),
    }

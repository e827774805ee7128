"""Rectangular affine loop nests and a reference interpreter.

The IR covers perfectly nested loops whose bounds are integer affine
expressions, with upper bounds optionally clamped by a min() of several
expressions (the form tile residue bounds take).  Nests are immutable and
hashable, so structurally identical nests compare equal and can be shared
freely across threads.

The interpreter executes a nest statement-by-statement in lexicographic
order with float32 arithmetic.  It is deliberately naive: it is the
functional-correctness oracle for every code path in this package that
claims to compute the same thing faster.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

DEFAULT_ENUMERATION_CAP = 10_000_000

READ = "read"
WRITE = "write"
READWRITE = "readwrite"
ACCESS_KINDS = (READ, WRITE, READWRITE)

# Statement op tags. Only multiply-accumulate is needed for GEMM-shaped nests.
MULTIPLY_ACCUMULATE = "mac"


class EnumerationCapError(Exception):
    """The iteration space exceeds the configured enumeration cap."""


class AnalysisBugError(Exception):
    """A well-formed nest produced an out-of-bounds access.

    This must never happen for nests that pass validation; it indicates a bug
    in an analysis or transformation, not in user input.
    """


@dataclass(frozen=True)
class AffineExpr:
    """Integer affine expression: sum(coeff * var) + const.

    Variables may be loop iterators or nest parameters; which is which is
    resolved by the evaluation environment.
    """

    terms: tuple[tuple[str, int], ...] = ()
    const: int = 0

    def __post_init__(self):
        cleaned = tuple(sorted((n, int(c)) for n, c in self.terms if c != 0))
        object.__setattr__(self, "terms", cleaned)
        object.__setattr__(self, "const", int(self.const))

    @classmethod
    def constant(cls, value: int) -> "AffineExpr":
        return cls((), value)

    @classmethod
    def var(cls, name: str, coeff: int = 1, const: int = 0) -> "AffineExpr":
        return cls(((name, coeff),), const)

    def evaluate(self, env: Mapping[str, int]) -> int:
        total = self.const
        for name, coeff in self.terms:
            total += coeff * env[name]
        return total

    def shift(self, delta: int) -> "AffineExpr":
        return AffineExpr(self.terms, self.const + delta)

    def variables(self) -> frozenset[str]:
        return frozenset(name for name, _ in self.terms)

    @property
    def is_constant(self) -> bool:
        return not self.terms

    def single_var(self) -> tuple[str, int] | None:
        """(name, const) when this is exactly one variable with coefficient 1."""
        if len(self.terms) == 1 and self.terms[0][1] == 1:
            return self.terms[0][0], self.const
        return None

    def __str__(self) -> str:
        parts = []
        for name, coeff in self.terms:
            if coeff == 1:
                parts.append(name)
            elif coeff == -1:
                parts.append(f"-{name}")
            else:
                parts.append(f"{coeff}*{name}")
        if self.const or not parts:
            parts.append(str(self.const))
        out = parts[0]
        for p in parts[1:]:
            out += f" - {p[1:]}" if p.startswith("-") else f" + {p}"
        return out


@dataclass(frozen=True)
class Loop:
    """One loop level: iterator in [lower, min(upper...)) stepping by step."""

    iterator: str
    lower: AffineExpr
    upper: tuple[AffineExpr, ...]
    step: int = 1

    def __post_init__(self):
        if self.step < 1:
            raise ValueError(f"loop {self.iterator}: step must be >= 1, got {self.step}")
        if not self.upper:
            raise ValueError(f"loop {self.iterator}: needs at least one upper bound")

    def bounds(self, env: Mapping[str, int]) -> tuple[int, int]:
        """Concrete (lower, exclusive upper) once outer iterators/params are bound."""
        lo = self.lower.evaluate(env)
        hi = min(e.evaluate(env) for e in self.upper)
        return lo, hi

    def values(self, env: Mapping[str, int]) -> range:
        lo, hi = self.bounds(env)
        return range(lo, hi, self.step)


@dataclass(frozen=True)
class ArrayRef:
    """A subscripted array access inside the nest statement."""

    array: str
    kind: str
    indices: tuple[AffineExpr, ...]

    def __post_init__(self):
        if self.kind not in ACCESS_KINDS:
            raise ValueError(f"bad access kind {self.kind!r}")
        if not self.indices:
            raise ValueError(f"ref {self.array}: needs at least one subscript")

    @property
    def reads(self) -> bool:
        return self.kind in (READ, READWRITE)

    @property
    def writes(self) -> bool:
        return self.kind in (WRITE, READWRITE)


@dataclass(frozen=True)
class LoopNest:
    """A perfectly nested loop with a single statement of array refs.

    `params` binds every free parameter (M, N, K) to a positive integer, so a
    nest is always concretely executable while its bound expressions stay
    symbolic for display and transformation.
    """

    loops: tuple[Loop, ...]
    refs: tuple[ArrayRef, ...]
    op: str = MULTIPLY_ACCUMULATE
    params: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "params",
                           tuple(sorted((p, int(v)) for p, v in self.params)))
        if not self.loops:
            raise ValueError("nest needs at least one loop")
        names = [l.iterator for l in self.loops]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate iterator names: {names}")
        for p, v in self.params:
            if v < 1:
                raise ValueError(f"parameter {p} must be positive, got {v}")
        declared = set(dict(self.params))
        for loop in self.loops:
            free = loop.lower.variables() | {v for e in loop.upper for v in e.variables()}
            if not free <= declared:
                raise ValueError(
                    f"loop {loop.iterator}: unbound variables {sorted(free - declared)}"
                )
            declared.add(loop.iterator)
        usable = set(names) | set(dict(self.params))
        for ref in self.refs:
            for e in ref.indices:
                if not e.variables() <= usable:
                    raise ValueError(
                        f"ref {ref.array}: unbound variables {sorted(e.variables() - usable)}"
                    )

    @property
    def param_env(self) -> dict[str, int]:
        return dict(self.params)

    def iterators(self) -> tuple[str, ...]:
        return tuple(l.iterator for l in self.loops)

    def depth_of(self, iterator: str) -> int:
        for d, l in enumerate(self.loops):
            if l.iterator == iterator:
                return d
        raise KeyError(iterator)


def gemm_nest(M: int, N: int, K: int) -> LoopNest:
    """The canonical 3-loop i/j/k matrix-multiply nest: C[i][j] += A[i][k]*B[k][j]."""
    for name, v in (("M", M), ("N", N), ("K", K)):
        if not isinstance(v, int) or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    loops = (
        Loop("i", AffineExpr.constant(0), (AffineExpr.var("M"),)),
        Loop("j", AffineExpr.constant(0), (AffineExpr.var("N"),)),
        Loop("k", AffineExpr.constant(0), (AffineExpr.var("K"),)),
    )
    refs = (
        ArrayRef("C", READWRITE, (AffineExpr.var("i"), AffineExpr.var("j"))),
        ArrayRef("A", READ, (AffineExpr.var("i"), AffineExpr.var("k"))),
        ArrayRef("B", READ, (AffineExpr.var("k"), AffineExpr.var("j"))),
    )
    return LoopNest(loops=loops, refs=refs, op=MULTIPLY_ACCUMULATE,
                    params=(("M", M), ("N", N), ("K", K)))


_GEMM_REF_SIG = (
    ("C", READWRITE, (AffineExpr.var("i"), AffineExpr.var("j"))),
    ("A", READ, (AffineExpr.var("i"), AffineExpr.var("k"))),
    ("B", READ, (AffineExpr.var("k"), AffineExpr.var("j"))),
)


def is_canonical_gemm(nest: LoopNest) -> bool:
    """True for the untiled 3-loop GEMM form produced by gemm_nest (any M,N,K)."""
    if len(nest.loops) != 3 or nest.op != MULTIPLY_ACCUMULATE:
        return False
    if tuple(l.iterator for l in nest.loops) != ("i", "j", "k"):
        return False
    if any(l.step != 1 or not l.lower.is_constant or l.lower.const != 0
           for l in nest.loops):
        return False
    if set(dict(nest.params)) != {"M", "N", "K"}:
        return False
    expect_upper = {"i": "M", "j": "N", "k": "K"}
    for l in nest.loops:
        if l.upper != (AffineExpr.var(expect_upper[l.iterator]),):
            return False
    return tuple((r.array, r.kind, r.indices) for r in nest.refs) == _GEMM_REF_SIG


def iter_iterations(nest: LoopNest) -> Iterator[tuple[int, ...]]:
    """Yield full iteration vectors (one value per loop) in lexicographic order."""
    env = nest.param_env
    depth = len(nest.loops)
    vec = [0] * depth

    def rec(d: int) -> Iterator[tuple[int, ...]]:
        if d == depth:
            yield tuple(vec)
            return
        for v in nest.loops[d].values(env):
            env[nest.loops[d].iterator] = v
            vec[d] = v
            yield from rec(d + 1)
        env.pop(nest.loops[d].iterator, None)

    yield from rec(0)


def enumerate_iterations(nest: LoopNest,
                         cap: int = DEFAULT_ENUMERATION_CAP) -> list[tuple[int, ...]]:
    """Complete, duplicate-free, lexicographically sorted iteration list."""
    out = []
    for vec in iter_iterations(nest):
        out.append(vec)
        if len(out) > cap:
            raise EnumerationCapError(
                f"iteration count exceeds enumeration cap {cap}"
            )
    return out


def _compiled_index(ref: ArrayRef, positions: Mapping[str, int],
                    params: Mapping[str, int]):
    """Lower a ref to [(base_const, ((vec_pos, coeff), ...)), ...] per subscript."""
    plan = []
    for expr in ref.indices:
        base = expr.const
        iter_terms = []
        for name, coeff in expr.terms:
            if name in params:
                base += coeff * params[name]
            else:
                iter_terms.append((positions[name], coeff))
        plan.append((base, tuple(iter_terms)))
    return plan


def interpret(nest: LoopNest, arrays: dict[str, np.ndarray],
              cap: int = DEFAULT_ENUMERATION_CAP) -> dict[str, np.ndarray]:
    """Execute the nest in lexicographic order on float32 buffers (in place).

    For the multiply-accumulate op the statement is refs[0] += refs[1]*refs[2],
    each elementary op rounded to float32, which matches what the generated
    kernels compute without FMA contraction.
    """
    if nest.op != MULTIPLY_ACCUMULATE:
        raise ValueError(f"unsupported statement op {nest.op!r}")
    if len(nest.refs) != 3:
        raise ValueError("multiply-accumulate requires exactly 3 array refs")
    out_ref, in1, in2 = nest.refs
    if not out_ref.writes:
        raise ValueError("first ref of a multiply-accumulate must be writable")
    for ref in nest.refs:
        if ref.array not in arrays:
            raise ValueError(f"missing buffer for array {ref.array}")
        buf = arrays[ref.array]
        if buf.dtype != np.float32:
            raise ValueError(f"buffer {ref.array} must be float32, got {buf.dtype}")
        if buf.ndim != len(ref.indices):
            raise ValueError(
                f"buffer {ref.array} rank {buf.ndim} != subscript count {len(ref.indices)}"
            )

    positions = {l.iterator: d for d, l in enumerate(nest.loops)}
    params = nest.param_env
    plans = [(arrays[r.array], _compiled_index(r, positions, params)) for r in nest.refs]

    def index_of(plan, vec):
        return tuple(base + sum(coeff * vec[pos] for pos, coeff in terms)
                     for base, terms in plan)

    count = 0
    for vec in iter_iterations(nest):
        count += 1
        if count > cap:
            raise EnumerationCapError(f"iteration count exceeds enumeration cap {cap}")
        (cbuf, cplan), (abuf, aplan), (bbuf, bplan) = plans
        ci = index_of(cplan, vec)
        ai = index_of(aplan, vec)
        bi = index_of(bplan, vec)
        for buf, idx, name in ((cbuf, ci, out_ref.array), (abuf, ai, in1.array),
                               (bbuf, bi, in2.array)):
            for x, extent in zip(idx, buf.shape):
                if x < 0 or x >= extent:
                    raise AnalysisBugError(
                        f"out-of-bounds access {name}{list(idx)} at iteration {vec}"
                    )
        cbuf[ci] = cbuf[ci] + abuf[ai] * bbuf[bi]
    return arrays


# ---------------------------------------------------------------------------
# JSON serialization (the CLI's nest interchange format)

def expr_to_json(expr: AffineExpr) -> dict:
    return {"const": expr.const, "terms": {n: c for n, c in expr.terms}}


def expr_from_json(data: dict) -> AffineExpr:
    return AffineExpr(tuple((n, int(c)) for n, c in data.get("terms", {}).items()),
                      int(data.get("const", 0)))


def nest_to_json(nest: LoopNest) -> dict:
    return {
        "loops": [
            {
                "iterator": l.iterator,
                "lower": expr_to_json(l.lower),
                "upper": [expr_to_json(e) for e in l.upper],
                "step": l.step,
            }
            for l in nest.loops
        ],
        "refs": [
            {
                "array": r.array,
                "kind": r.kind,
                "indices": [expr_to_json(e) for e in r.indices],
            }
            for r in nest.refs
        ],
        "op": nest.op,
        "parameters": dict(nest.params),
    }


def nest_from_json(data: dict) -> LoopNest:
    loops = tuple(
        Loop(
            iterator=l["iterator"],
            lower=expr_from_json(l["lower"]),
            upper=tuple(expr_from_json(e) for e in l["upper"]),
            step=int(l.get("step", 1)),
        )
        for l in data["loops"]
    )
    refs = tuple(
        ArrayRef(
            array=r["array"],
            kind=r["kind"],
            indices=tuple(expr_from_json(e) for e in r["indices"]),
        )
        for r in data["refs"]
    )
    params = tuple(sorted((k, int(v)) for k, v in data.get("parameters", {}).items()))
    return LoopNest(loops=loops, refs=refs, op=data.get("op", MULTIPLY_ACCUMULATE),
                    params=params)

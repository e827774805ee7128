"""AVX-512 GEMM microkernel source generation.

Emits C text for an unroll-and-jammed float32 matrix-multiply microkernel:
C accumulators are hoisted out of the k loop, A elements are broadcast with
_mm512_set1_ps, B rows are loaded as 16-lane vectors, and every (A broadcast,
B vector) pair feeds one fused multiply-add.  Iterations not covered by the
unrolled full-tile region run in scalar residue loops.

Also provides the scalar reference kernel, a static vector-register budget
check, the residue-region plan, a lane-level semantic emulator (used to verify
kernels without compiling them), and a self-checking timing harness.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

VECTOR_LANES = 16
TOTAL_VECTOR_REGISTERS = 32


class RegisterPressureError(Exception):
    """The unroll factors need more vector registers than the target has."""


class UnsupportedSpecError(Exception):
    """The spec cannot be lowered to the vectorized kernel form."""


@dataclass(frozen=True)
class KernelSpec:
    """Unroll factors and strides governing microkernel emission.

    Strides are in elements.  The vectorized path additionally requires u_j to
    be a multiple of the vector width; that is checked at emission so plain
    arithmetic like residue planning works for any factors.
    """

    u_i: int
    u_j: int
    u_k: int
    a_stride: int
    b_stride: int
    c_stride: int
    lanes: int = VECTOR_LANES

    def __post_init__(self):
        for name in ("u_i", "u_j", "u_k", "a_stride", "b_stride", "c_stride", "lanes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def unrolls(self) -> tuple[int, int, int]:
        return (self.u_i, self.u_j, self.u_k)


def kernel_spec_for(u_i: int, u_j: int, u_k: int, M: int, N: int, K: int) -> KernelSpec:
    """Spec with row-major strides for dense MxK * KxN buffers."""
    return KernelSpec(u_i=u_i, u_j=u_j, u_k=u_k, a_stride=K, b_stride=N, c_stride=N)


def register_demand(spec: KernelSpec) -> int:
    """Vector registers the kernel body keeps live.

    u_i*(u_j/lanes) C accumulators + u_k*(u_j/lanes) B vectors + u_i*u_k A
    broadcasts.  u_j below one vector rounds the chunk count up to 1 so the
    formula stays meaningful for infeasible-but-representable specs.
    """
    chunks = max(1, -(-spec.u_j // spec.lanes))
    return spec.u_i * chunks + spec.u_k * chunks + spec.u_i * spec.u_k


def check_register_budget(spec: KernelSpec,
                          total: int = TOTAL_VECTOR_REGISTERS) -> int:
    need = register_demand(spec)
    if need > total:
        raise RegisterPressureError(
            f"unroll factors {spec.unrolls} need {need} vector registers, "
            f"budget is {total}"
        )
    return need


@dataclass(frozen=True)
class Region:
    """Half-open index box [i0,i1) x [j0,j1) x [k0,k1) and its execution mode."""

    i0: int
    i1: int
    j0: int
    j1: int
    k0: int
    k1: int
    mode: str  # "vector" | "scalar"

    @property
    def volume(self) -> int:
        return (max(0, self.i1 - self.i0) * max(0, self.j1 - self.j0)
                * max(0, self.k1 - self.k0))


@dataclass(frozen=True)
class ResiduePlan:
    full: Region
    residues: tuple[Region, ...]

    @property
    def regions(self) -> tuple[Region, ...]:
        return (self.full,) + self.residues


def residue_plan(M: int, N: int, K: int, spec: KernelSpec) -> ResiduePlan:
    """Partition [0,M)x[0,N)x[0,K) into the unrolled full region and scalar residues.

    The three residue boxes peel leftover k, then leftover j, then leftover i,
    which together with the full region tile the space exactly.
    """
    m_full = (M // spec.u_i) * spec.u_i
    n_full = (N // spec.u_j) * spec.u_j
    k_full = (K // spec.u_k) * spec.u_k
    full = Region(0, m_full, 0, n_full, 0, k_full, "vector")
    residues = (
        Region(0, m_full, 0, n_full, k_full, K, "scalar"),
        Region(0, m_full, n_full, N, 0, K, "scalar"),
        Region(m_full, M, 0, N, 0, K, "scalar"),
    )
    return ResiduePlan(full=full, residues=residues)


# ---------------------------------------------------------------------------
# Source emission

def _acc_name(base: str, n: int) -> str:
    return base if n == 0 else f"{base}{n}"


def _a_elem(spec: KernelSpec, ii: int, kk: int) -> str:
    row = "i" if ii == 0 else f"(i+{ii})"
    col = "k" if kk == 0 else f"(k+{kk})"
    return f"A[{row}*AStride + {col}]"


def _b_addr(spec: KernelSpec, kk: int, jc: int) -> str:
    row = "k" if kk == 0 else f"(k+{kk})"
    col = "j" if jc == 0 else f"j+{jc * spec.lanes}"
    return f"&B[{row}*BStride + {col}]"


def _c_addr(spec: KernelSpec, ii: int, jc: int) -> str:
    row = "i" if ii == 0 else f"(i+{ii})"
    col = "j" if jc == 0 else f"j+{jc * spec.lanes}"
    return f"&C[{row}*CStride + {col}]"


def _scalar_triple(body_indent: str, i_range: str, j_range: str, k_range: str) -> str:
    ind = body_indent
    return (
        f"{ind}for (int i = {i_range[0]}; i < {i_range[1]}; i++) {{\n"
        f"{ind}    for (int j = {j_range[0]}; j < {j_range[1]}; j++) {{\n"
        f"{ind}        for (int k = {k_range[0]}; k < {k_range[1]}; k++) {{\n"
        f"{ind}            C[i*CStride + j] += A[i*AStride + k] * B[k*BStride + j];\n"
        f"{ind}        }}\n"
        f"{ind}    }}\n"
        f"{ind}}}\n"
    )


def emit_vector_kernel(spec: KernelSpec, name: str = "gemm_kernel",
                       total_registers: int = TOTAL_VECTOR_REGISTERS) -> str:
    """C source of the vectorized microkernel for this spec.

    The function takes runtime M, N, K; unroll factors and strides are baked
    in.  B and C use aligned vector load/store when their strides are
    lane-aligned, unaligned variants otherwise.
    """
    if spec.u_j % spec.lanes != 0:
        raise UnsupportedSpecError(
            f"u_j must be a multiple of {spec.lanes}, got {spec.u_j}"
        )
    check_register_budget(spec, total=total_registers)

    jcn = spec.u_j // spec.lanes
    b_load = "_mm512_load_ps" if spec.b_stride % spec.lanes == 0 else "_mm512_loadu_ps"
    c_load = "_mm512_load_ps" if spec.c_stride % spec.lanes == 0 else "_mm512_loadu_ps"
    c_store = "_mm512_store_ps" if spec.c_stride % spec.lanes == 0 else "_mm512_storeu_ps"

    lines = []
    w = lines.append
    w("#include <immintrin.h>")
    w("")
    w(f"/* GEMM microkernel: C[MxN] += A[MxK] * B[KxN], float32,")
    w(f" * unroll factors ({spec.u_i}, {spec.u_j}, {spec.u_k}). */")
    w(f"void {name}(const float *A, const float *B, float *C,")
    w(f"{' ' * (6 + len(name))}int M, int N, int K)")
    w("{")
    w(f"    const int AStride = {spec.a_stride};")
    w(f"    const int BStride = {spec.b_stride};")
    w(f"    const int CStride = {spec.c_stride};")
    w(f"    int M_full = (M / {spec.u_i}) * {spec.u_i};")
    w(f"    int N_full = (N / {spec.u_j}) * {spec.u_j};")
    w(f"    int K_full = (K / {spec.u_k}) * {spec.u_k};")
    w(f"    for (int i = 0; i < M_full; i += {spec.u_i}) {{")
    w(f"        for (int j = 0; j < N_full; j += {spec.u_j}) {{")
    for ii in range(spec.u_i):
        for jc in range(jcn):
            acc = _acc_name("vecC", ii * jcn + jc)
            w(f"            __m512 {acc} = {c_load}({_c_addr(spec, ii, jc)});")
    w(f"            for (int k = 0; k < K_full; k += {spec.u_k}) {{")
    # Fig-style schedule: lead A broadcast, then all B loads, then the
    # remaining A broadcasts, then FMAs grouped by k offset.
    w(f"                __m512 vecA = _mm512_set1_ps({_a_elem(spec, 0, 0)});")
    for kk in range(spec.u_k):
        for jc in range(jcn):
            b = _acc_name("vecB", kk * jcn + jc)
            w(f"                __m512 {b} = {b_load}({_b_addr(spec, kk, jc)});")
    for ii in range(spec.u_i):
        for kk in range(spec.u_k):
            if ii == 0 and kk == 0:
                continue
            a = _acc_name("vecA", ii * spec.u_k + kk)
            w(f"                __m512 {a} = _mm512_set1_ps({_a_elem(spec, ii, kk)});")
    for kk in range(spec.u_k):
        for ii in range(spec.u_i):
            for jc in range(jcn):
                acc = _acc_name("vecC", ii * jcn + jc)
                a = _acc_name("vecA", ii * spec.u_k + kk)
                b = _acc_name("vecB", kk * jcn + jc)
                w(f"                {acc} = _mm512_fmadd_ps({a}, {b}, {acc});")
    w("            }")
    for ii in range(spec.u_i):
        for jc in range(jcn):
            acc = _acc_name("vecC", ii * jcn + jc)
            w(f"            {c_store}({_c_addr(spec, ii, jc)}, {acc});")
    w("        }")
    w("    }")
    w("    /* Residue code for non-full M, N, K values. */")
    w(_scalar_triple("    ", ("0", "M_full"), ("0", "N_full"), ("K_full", "K")).rstrip())
    w(_scalar_triple("    ", ("0", "M_full"), ("N_full", "N"), ("0", "K")).rstrip())
    w(_scalar_triple("    ", ("M_full", "M"), ("0", "N"), ("0", "K")).rstrip())
    w("}")
    w("")
    return "\n".join(lines)


def emit_scalar_kernel(M: int, N: int, K: int,
                       strides: tuple[int, int, int] | None = None,
                       name: str = "gemm_scalar") -> str:
    """Plain triple-loop reference kernel with sizes baked in."""
    a_s, b_s, c_s = strides if strides is not None else (K, N, N)
    lines = []
    w = lines.append
    w(f"/* Reference GEMM: C[{M}x{N}] += A[{M}x{K}] * B[{K}x{N}], float32. */")
    w(f"void {name}(const float *A, const float *B, float *C)")
    w("{")
    w(f"    const int AStride = {a_s};")
    w(f"    const int BStride = {b_s};")
    w(f"    const int CStride = {c_s};")
    w(_scalar_triple("    ", ("0", str(M)), ("0", str(N)), ("0", str(K))).rstrip())
    w("}")
    w("")
    return "\n".join(lines)


def census_vector_registers(source: str) -> int:
    """Distinct __m512 temporaries declared in emitted kernel text."""
    return len(set(re.findall(r"__m512 (\w+) =", source)))


def intrinsic_counts(source: str) -> dict[str, int]:
    """Static occurrence counts of each vector intrinsic in the text."""
    out = {}
    for name in ("_mm512_load_ps", "_mm512_loadu_ps", "_mm512_set1_ps",
                 "_mm512_fmadd_ps", "_mm512_store_ps", "_mm512_storeu_ps"):
        out[name] = len(re.findall(re.escape(name) + r"\(", source))
    return out


# ---------------------------------------------------------------------------
# Lane-level semantic emulation

def emulate_kernel(spec: KernelSpec, A: np.ndarray, B: np.ndarray,
                   C: np.ndarray) -> np.ndarray:
    """Execute the emitted kernel's semantics on float32 arrays, in place.

    Mirrors the generated code exactly at the per-element level: the full-tile
    region accumulates along ascending k with one float32 multiply and one
    float32 add per step (no FMA contraction), then the scalar residue regions
    run in emission order.  Output is bit-identical to compiling the kernel
    without contraction, and to the nest interpreter.
    """
    if spec.u_j % spec.lanes != 0:
        raise UnsupportedSpecError(
            f"u_j must be a multiple of {spec.lanes}, got {spec.u_j}"
        )
    check_register_budget(spec)
    for buf, nm in ((A, "A"), (B, "B"), (C, "C")):
        if buf.dtype != np.float32:
            raise ValueError(f"{nm} must be float32")
    M, K = A.shape
    K2, N = B.shape
    if K2 != K or C.shape != (M, N):
        raise ValueError("shape mismatch between A, B, C")

    plan = residue_plan(M, N, K, spec)
    full = plan.full
    if full.volume:
        for j0 in range(full.j0, full.j1, spec.u_j):
            acc = C[full.i0:full.i1, j0:j0 + spec.u_j].copy()
            for k in range(full.k0, full.k1):
                acc = acc + A[full.i0:full.i1, k:k + 1] * B[k:k + 1, j0:j0 + spec.u_j]
            C[full.i0:full.i1, j0:j0 + spec.u_j] = acc
    for reg in plan.residues:
        if not reg.volume:
            continue
        acc = C[reg.i0:reg.i1, reg.j0:reg.j1].copy()
        for k in range(reg.k0, reg.k1):
            acc = acc + A[reg.i0:reg.i1, k:k + 1] * B[k:k + 1, reg.j0:reg.j1]
        C[reg.i0:reg.i1, reg.j0:reg.j1] = acc
    return C


# ---------------------------------------------------------------------------
# Timing harness

HARNESS_GFLOPS_RE = re.compile(r"^GFLOPS: ([0-9.eE+-]+)\s*$", re.MULTILINE)
HARNESS_FAIL_RE = re.compile(r"^CORRECTNESS: FAIL (.*)$", re.MULTILINE)


def emit_harness(spec: KernelSpec, M: int, N: int, K: int,
                 repetitions: int = 100, tolerance: float = 1e-4,
                 scalar_only: bool = False) -> str:
    """Self-checking benchmark program around the emitted kernel(s).

    Verifies the vector kernel against the scalar reference within the given
    relative tolerance before timing, then prints one "GFLOPS: <float>" line
    per repetition.  With scalar_only, times the scalar reference instead
    (the baseline measurement).
    """
    scalar_src = emit_scalar_kernel(M, N, K, (spec.a_stride, spec.b_stride,
                                              spec.c_stride))
    vector_src = "" if scalar_only else emit_vector_kernel(spec)
    timed_call = "gemm_scalar(A, B, C);" if scalar_only \
        else "gemm_kernel(A, B, C, M, N, K);"
    check_block = "" if scalar_only else f"""\
    gemm_scalar(A, B, Cref);
    gemm_kernel(A, B, C, M, N, K);
    for (int i = 0; i < M; i++) {{
        for (int j = 0; j < N; j++) {{
            float got = C[i*{spec.c_stride} + j];
            float want = Cref[i*{spec.c_stride} + j];
            float denom = fabsf(want) > 1.0f ? fabsf(want) : 1.0f;
            if (fabsf(got - want) / denom > {tolerance}f) {{
                printf("CORRECTNESS: FAIL i=%d j=%d got=%.9g want=%.9g\\n",
                       i, j, (double)got, (double)want);
                return 4;
            }}
        }}
    }}
"""
    return f"""\
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <math.h>
#include <time.h>

{vector_src}
{scalar_src}
static unsigned int lcg_state = 12345u;

static float frand(void)
{{
    lcg_state = lcg_state * 1664525u + 1013904223u;
    return ((float)(lcg_state >> 8) / (float)(1u << 24)) - 0.5f;
}}

static double now_sec(void)
{{
    struct timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return (double)ts.tv_sec + 1e-9 * (double)ts.tv_nsec;
}}

int main(void)
{{
    const int M = {M}, N = {N}, K = {K};
    float *A = aligned_alloc(64, ((sizeof(float) * M * {spec.a_stride} + 63) / 64) * 64);
    float *B = aligned_alloc(64, ((sizeof(float) * K * {spec.b_stride} + 63) / 64) * 64);
    float *C = aligned_alloc(64, ((sizeof(float) * M * {spec.c_stride} + 63) / 64) * 64);
    float *Cref = aligned_alloc(64, ((sizeof(float) * M * {spec.c_stride} + 63) / 64) * 64);
    if (!A || !B || !C || !Cref) return 3;
    for (long n = 0; n < (long)M * {spec.a_stride}; n++) A[n] = frand();
    for (long n = 0; n < (long)K * {spec.b_stride}; n++) B[n] = frand();
    memset(C, 0, sizeof(float) * M * {spec.c_stride});
    memset(Cref, 0, sizeof(float) * M * {spec.c_stride});

{check_block}    printf("CORRECTNESS: PASS\\n");

    for (int warm = 0; warm < 3; warm++) {{
        memset(C, 0, sizeof(float) * M * {spec.c_stride});
        {timed_call}
    }}
    for (int rep = 0; rep < {repetitions}; rep++) {{
        memset(C, 0, sizeof(float) * M * {spec.c_stride});
        double t0 = now_sec();
        {timed_call}
        double t1 = now_sec();
        double gflops = 2.0 * M * N * K / (t1 - t0) / 1e9;
        printf("GFLOPS: %.6f\\n", gflops);
    }}
    free(A); free(B); free(C); free(Cref);
    return 0;
}}
"""

"""Interchangeable performance backends for kernel and variant evaluation.

Three routes:

* analytic - a deterministic cost model over static operation counts.  Fast,
  pure, and seedless; the substrate for RL development and every
  reproducibility test.
* native - compile the emitted kernel plus its self-checking harness with the
  system compiler and time it on the host.  Refuses to report a number for a
  kernel that failed its correctness check.
* interpreted - lane-level emulation checked against the nest interpreter,
  exact equality required.
"""

from __future__ import annotations

import os
import re
import shutil
import statistics
import subprocess
import tempfile
import threading
from dataclasses import dataclass, replace

import numpy as np

from . import codegen
from .codegen import KernelSpec, check_register_budget, residue_plan
from .ir import gemm_nest, interpret


class InfeasibleSpecError(Exception):
    """The spec cannot be evaluated (register budget, vector-width rules)."""


class ToolchainError(Exception):
    """Compilation or execution of the native harness failed."""


class MiscompileError(Exception):
    """The native kernel's output disagreed with the scalar reference."""


class CodegenBugError(Exception):
    """Emulated kernel output disagreed with the interpreter."""


@dataclass(frozen=True)
class EvaluationResult:
    gflops: float
    correctness_checked: bool
    raw_time_s: float
    backend: str

    def __post_init__(self):
        if self.gflops <= 0:
            raise ValueError("performance must be positive")


@dataclass(frozen=True)
class AnalyticCostModel:
    """Unit costs for the deterministic backend.

    Magnitudes are arbitrary but fixed; everything downstream depends only on
    the ordinal structure (vector work is cheap, scalar residue work is
    expensive, spills are prohibitive).  Each k-loop body is charged the
    larger of its issue time and the accumulator dependence chain u_k *
    fma_latency - without the latency term, k-unrolling would never beat
    u_k = 1 and the unroll lattice would have no interior optimum.
    """

    fma: float = 1.0
    vector_load: float = 1.0
    vector_store: float = 1.0
    broadcast: float = 1.0
    scalar_mac: float = 8.0
    spill: float = 20.0
    issue_width: float = 2.0
    fma_latency: float = 5.0
    loop_overhead: float = 1.0

    def __post_init__(self):
        for f in ("fma", "vector_load", "vector_store", "broadcast",
                  "scalar_mac", "spill", "issue_width", "fma_latency",
                  "loop_overhead"):
            if getattr(self, f) <= 0:
                raise ValueError(f"cost {f} must be positive")


DEFAULT_COST_MODEL = AnalyticCostModel()


def op_census(spec: KernelSpec, M: int, N: int, K: int) -> dict[str, int]:
    """Static operation counts of the emitted kernel at the given sizes.

    Derived from the register-blocking structure: per full tile there are
    u_i*(u_j/lanes) C load/store pairs, and per k step u_k*(u_j/lanes) B
    loads, u_i*u_k A broadcasts, and u_i*u_k*(u_j/lanes) FMAs.  Residue
    iterations run as scalar multiply-accumulates.
    """
    if spec.u_j % spec.lanes != 0:
        raise InfeasibleSpecError(f"u_j must be a multiple of {spec.lanes}")
    plan = residue_plan(M, N, K, spec)
    full = plan.full
    jcn = spec.u_j // spec.lanes
    tiles = ((full.i1 - full.i0) // spec.u_i) * ((full.j1 - full.j0) // spec.u_j)
    ksteps = (full.k1 - full.k0) // spec.u_k
    return {
        "fma": tiles * ksteps * spec.u_i * spec.u_k * jcn,
        "vector_load_b": tiles * ksteps * spec.u_k * jcn,
        "vector_load_c": tiles * spec.u_i * jcn,
        "vector_store_c": tiles * spec.u_i * jcn,
        "broadcast": tiles * ksteps * spec.u_i * spec.u_k,
        "scalar_mac": M * N * K - full.volume,
    }


def evaluate_analytic(spec: KernelSpec, M: int, N: int, K: int,
                      model: AnalyticCostModel = DEFAULT_COST_MODEL,
                      total_registers: int = codegen.TOTAL_VECTOR_REGISTERS,
                      ) -> EvaluationResult:
    """Deterministic modeled performance of the kernel at the given sizes."""
    try:
        need = check_register_budget(spec, total=total_registers)
    except codegen.RegisterPressureError as e:
        raise InfeasibleSpecError(str(e)) from e
    if spec.u_j % spec.lanes != 0:
        raise InfeasibleSpecError(f"u_j must be a multiple of {spec.lanes}")
    ops = op_census(spec, M, N, K)
    jcn = spec.u_j // spec.lanes
    plan = residue_plan(M, N, K, spec)
    full = plan.full
    tiles = ((full.i1 - full.i0) // spec.u_i) * ((full.j1 - full.j0) // spec.u_j)
    bodies = tiles * ((full.k1 - full.k0) // spec.u_k)
    body_issue = (
        spec.u_i * spec.u_k * jcn * model.fma
        + spec.u_k * jcn * model.vector_load
        + spec.u_i * spec.u_k * model.broadcast
    ) / model.issue_width
    body_time = max(body_issue, spec.u_k * model.fma_latency) + model.loop_overhead
    tile_time = (ops["vector_load_c"] * model.vector_load
                 + ops["vector_store_c"] * model.vector_store) / model.issue_width
    cost = (bodies * body_time + tile_time
            + ops["scalar_mac"] * model.scalar_mac
            + max(0, need - total_registers) * model.spill)
    gflops = 2.0 * M * N * K / cost
    return EvaluationResult(gflops=gflops, correctness_checked=False,
                            raw_time_s=cost * 1e-9, backend="analytic")


def scalar_baseline_analytic(M: int, N: int, K: int,
                             model: AnalyticCostModel = DEFAULT_COST_MODEL,
                             ) -> EvaluationResult:
    """Modeled performance of the all-scalar reference kernel."""
    cost = M * N * K * model.scalar_mac
    return EvaluationResult(gflops=2.0 * M * N * K / cost,
                            correctness_checked=False,
                            raw_time_s=cost * 1e-9, backend="analytic")


def evaluate_variant_analytic(profile, M: int, N: int, K: int,
                              latencies: tuple[float, ...] | None = None,
                              ) -> EvaluationResult:
    """Deterministic performance proxy for a tiled variant from its profile.

    Stand-in for running the tiled nest on hardware: working-set mass resident
    in slower levels costs proportionally more.  Latencies cover each cache
    slot plus memory.
    """
    slots = profile.levels
    if latencies is None:
        base = (1.0, 4.0, 15.0, 80.0)
        latencies = base[:len(slots) - 1] + (base[-1],) if len(slots) <= 4 else \
            tuple(4.0 ** i for i in range(len(slots)))
    if len(latencies) != len(slots):
        raise ValueError(f"need {len(slots)} latencies, got {len(latencies)}")
    cost = 1.0 + sum(float(c) * l for c, l in zip(slots, latencies))
    return EvaluationResult(gflops=2.0 * M * N * K / cost,
                            correctness_checked=False,
                            raw_time_s=cost * 1e-9, backend="analytic-variant")


def evaluate_interpreted(spec: KernelSpec, M: int, N: int, K: int,
                         rng: np.random.Generator | None = None,
                         arrays: dict[str, np.ndarray] | None = None) -> bool:
    """Emulate the kernel and require exact equality with the interpreter.

    Inputs come from `arrays` ("A", "B", "C") when given, otherwise from a
    seeded generator.
    """
    if arrays is not None:
        A, B, C0 = arrays["A"], arrays["B"], arrays["C"]
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        A = (rng.random((M, K), dtype=np.float32) - 0.5).astype(np.float32)
        B = (rng.random((K, N), dtype=np.float32) - 0.5).astype(np.float32)
        C0 = rng.random((M, N), dtype=np.float32)
    want = C0.copy()
    interpret(gemm_nest(M, N, K), {"A": A, "B": B, "C": want})
    got = C0.copy()
    codegen.emulate_kernel(spec, A, B, got)
    if not np.array_equal(got, want):
        bad = np.argwhere(got != want)[0]
        raise CodegenBugError(
            f"emulated kernel differs from interpreter first at "
            f"C[{bad[0]}][{bad[1]}]: {got[tuple(bad)]} vs {want[tuple(bad)]}"
        )
    return True


# ---------------------------------------------------------------------------
# Native backend

_NATIVE_LOCK = threading.Lock()

DEFAULT_COMPILER_CMD = ("cc", "-O3", "-march=native", "-o", "{out}", "{src}", "-lm")


def host_supports_avx512() -> bool:
    try:
        with open("/proc/cpuinfo") as f:
            return "avx512f" in f.read()
    except OSError:
        return False


def toolchain_available(compiler_cmd=DEFAULT_COMPILER_CMD) -> bool:
    return shutil.which(compiler_cmd[0]) is not None


def _median_of_means(samples: list[float], groups: int = 10) -> float:
    groups = max(1, min(groups, len(samples)))
    size = len(samples) // groups
    means = [statistics.fmean(samples[g * size:(g + 1) * size])
             for g in range(groups)]
    return statistics.median(means)


def evaluate_native(spec: KernelSpec, M: int, N: int, K: int,
                    repetitions: int = 100,
                    compiler_cmd=DEFAULT_COMPILER_CMD,
                    workdir: str | None = None,
                    average: str = "median_of_means",
                    tolerance: float = 1e-4,
                    scalar_only: bool = False,
                    timeout_s: float = 600.0) -> EvaluationResult:
    """Compile, verify and time the emitted kernel on the host.

    One timing run at a time process-wide (a lock guards the backend) so
    concurrent tuning jobs do not perturb each other's measurements.
    """
    source = codegen.emit_harness(spec, M, N, K, repetitions=repetitions,
                                  tolerance=tolerance, scalar_only=scalar_only)
    with _NATIVE_LOCK:
        ctx = tempfile.TemporaryDirectory(prefix="looptune-native-", dir=workdir)
        with ctx as td:
            src = os.path.join(td, "bench.c")
            binary = os.path.join(td, "bench")
            with open(src, "w") as f:
                f.write(source)
            cmd = [part.format(out=binary, src=src) for part in compiler_cmd]
            try:
                comp = subprocess.run(cmd, capture_output=True, text=True)
            except FileNotFoundError as e:
                raise ToolchainError(f"compiler not found: {cmd[0]}") from e
            if comp.returncode != 0:
                raise ToolchainError(
                    f"compile failed ({' '.join(cmd)}):\n{comp.stderr}"
                )
            try:
                run = subprocess.run([binary], capture_output=True, text=True,
                                     timeout=timeout_s)
            except subprocess.TimeoutExpired as e:
                raise ToolchainError(f"harness timed out after {timeout_s}s") from e
            fail = codegen.HARNESS_FAIL_RE.search(run.stdout)
            if fail or run.returncode == 4:
                raise MiscompileError(
                    f"kernel output mismatch: {fail.group(1) if fail else run.stdout}"
                )
            if run.returncode != 0:
                raise ToolchainError(
                    f"harness exited {run.returncode}:\n{run.stdout}\n{run.stderr}"
                )
            samples = [float(m) for m in codegen.HARNESS_GFLOPS_RE.findall(run.stdout)]
            if not samples:
                raise ToolchainError(f"no GFLOPS lines in harness output:\n{run.stdout}")
    if average == "mean":
        gflops = statistics.fmean(samples)
    elif average == "median_of_means":
        gflops = _median_of_means(samples)
    else:
        raise ValueError(f"unknown averaging mode {average!r}")
    return EvaluationResult(
        gflops=gflops, correctness_checked=not scalar_only,
        raw_time_s=2.0 * M * N * K / (gflops * 1e9), backend="native",
    )

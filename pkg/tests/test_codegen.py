import ctypes
import os
import re
import subprocess

import numpy as np
import pytest

from looptune import codegen as cg, evaluator as ev, ir

from conftest import interpret_gemm, random_float32


def spec_of(u, mnk=(64, 64, 64)):
    return cg.kernel_spec_for(*u, *mnk)


class TestRegisterBudget:
    def test_single_accumulator_spec_needs_three(self):
        # vecC + vecA + vecB, matching the three temporaries of the generated text.
        assert cg.check_register_budget(spec_of((1, 16, 1))) == 3

    def test_two_by_two_unrolled_spec_needs_eight(self):
        assert cg.check_register_budget(spec_of((2, 16, 2))) == 8

    def test_within_budget(self):
        assert cg.check_register_budget(spec_of((4, 32, 2))) == 20

    def test_over_budget(self):
        with pytest.raises(cg.RegisterPressureError):
            cg.check_register_budget(spec_of((8, 64, 2)))

    def test_demand_formula(self):
        for u in [(1, 16, 1), (2, 32, 2), (4, 16, 4), (1, 48, 2)]:
            spec = spec_of(u)
            chunks = u[1] // 16
            assert cg.register_demand(spec) == (
                u[0] * chunks + u[2] * chunks + u[0] * u[2])


class TestEmitVectorKernel:
    def test_single_accumulator_kernel_structure(self):
        src = cg.emit_vector_kernel(spec_of((1, 16, 1)))
        assert "int M_full = (M / 1) * 1;" in src
        assert "int N_full = (N / 16) * 16;" in src
        k_body = src[src.index("for (int k"):src.index("            }")]
        assert k_body.count("_mm512_set1_ps") == 1
        assert k_body.count("_mm512_load_ps") == 1
        assert k_body.count("_mm512_fmadd_ps") == 1
        # C load hoisted above the k loop, store below it.
        assert src.index("vecC = _mm512_load_ps") < src.index("for (int k")
        assert src.index("_mm512_store_ps(&C[") > src.index("for (int k")
        assert cg.census_vector_registers(src) == 3

    def test_two_by_two_unrolled_kernel_structure(self):
        src = cg.emit_vector_kernel(spec_of((2, 16, 2)))
        k_body = src[src.index("for (int k"):src.index("            }")]
        assert k_body.count("_mm512_set1_ps") == 4
        assert k_body.count("_mm512_load_ps") == 2
        assert k_body.count("_mm512_fmadd_ps") == 4
        names = re.findall(r"__m512 (\w+) =", src)
        assert names == ["vecC", "vecC1", "vecA", "vecB", "vecB1",
                         "vecA1", "vecA2", "vecA3"]
        assert cg.census_vector_registers(src) == 8

    def test_census_matches_budget_formula(self):
        for u in [(1, 16, 1), (2, 16, 2), (4, 32, 2), (1, 32, 4), (2, 48, 1),
                  (4, 16, 1), (1, 64, 2)]:
            spec = spec_of(u)
            src = cg.emit_vector_kernel(spec)
            assert cg.census_vector_registers(src) == cg.register_demand(spec)

    def test_residue_loops_present(self):
        src = cg.emit_vector_kernel(spec_of((2, 16, 2)))
        assert "Residue code for non-full M, N, K" in src
        assert src.count("C[i*CStride + j] += A[i*AStride + k] * B[k*BStride + j];") == 3

    def test_deterministic_emission(self):
        a = cg.emit_vector_kernel(spec_of((4, 32, 2)))
        b = cg.emit_vector_kernel(spec_of((4, 32, 2)))
        assert a == b

    def test_rejects_bad_u_j(self):
        with pytest.raises(cg.UnsupportedSpecError):
            cg.emit_vector_kernel(cg.KernelSpec(1, 8, 1, 64, 64, 64))

    def test_rejects_over_budget(self):
        with pytest.raises(cg.RegisterPressureError):
            cg.emit_vector_kernel(spec_of((8, 64, 2)))

    def test_alignment_selects_load_flavor(self):
        aligned = cg.emit_vector_kernel(spec_of((1, 16, 1), (64, 64, 64)))
        assert "_mm512_load_ps" in aligned and "_mm512_loadu_ps" not in aligned
        unaligned = cg.emit_vector_kernel(spec_of((1, 16, 1), (63, 63, 63)))
        assert "_mm512_loadu_ps" in unaligned and "_mm512_storeu_ps" in unaligned


class TestEmitScalarKernel:
    def test_exactly_one_multiply_accumulate(self):
        src = cg.emit_scalar_kernel(5, 7, 3)
        assert len(re.findall(r"\+=.*\*.*;", src)) == 1

    def test_unit_problem(self):
        src = cg.emit_scalar_kernel(1, 1, 1)
        assert "i < 1" in src and "j < 1" in src and "k < 1" in src

    @pytest.mark.skipif(not ev.toolchain_available(), reason="no C compiler")
    def test_compiled_scalar_matches_interpreter_on_integers(self, tmp_path):
        M, N, K = 5, 6, 4
        src = cg.emit_scalar_kernel(M, N, K)
        c_path = os.path.join(tmp_path, "scalar.c")
        so_path = os.path.join(tmp_path, "scalar.so")
        with open(c_path, "w") as f:
            f.write(src)
        subprocess.run(["cc", "-O3", "-shared", "-fPIC", "-o", so_path, c_path],
                       check=True)
        lib = ctypes.CDLL(so_path)
        rng = np.random.default_rng(5)
        A = rng.integers(-4, 5, (M, K)).astype(np.float32)
        B = rng.integers(-4, 5, (K, N)).astype(np.float32)
        C = np.zeros((M, N), dtype=np.float32)
        ptr = lambda a: a.ctypes.data_as(ctypes.POINTER(ctypes.c_float))
        lib.gemm_scalar(ptr(A), ptr(B), ptr(C))
        want = interpret_gemm(M, N, K, A, B, np.zeros((M, N), np.float32))
        assert np.array_equal(C, want)


class TestResiduePlan:
    def test_one_residue_row(self):
        plan = cg.residue_plan(5, 16, 4, cg.KernelSpec(2, 16, 1, 4, 16, 16))
        assert plan.full.i1 == 4
        row = plan.residues[2]
        assert (row.i0, row.i1) == (4, 5) and row.volume == 1 * 16 * 4

    def test_exact_multiples_leave_no_residue(self):
        plan = cg.residue_plan(8, 32, 6, cg.KernelSpec(2, 16, 3, 6, 32, 32))
        assert plan.full.volume == 8 * 32 * 6
        assert all(r.volume == 0 for r in plan.residues)

    def test_transformer_row_residue(self):
        plan = cg.residue_plan(31999, 1024, 84, cg.KernelSpec(4, 32, 1, 84, 1024, 1024))
        assert plan.full.i1 == 31996
        assert plan.residues[2].i1 - plan.residues[2].i0 == 3

    def test_partition_sample(self):
        # Exhaustive small-case check; the full sweep runs in acceptance.
        for (M, N, K), u in [((5, 7, 3), (2, 3, 2)), ((8, 8, 8), (3, 3, 3)),
                             ((4, 4, 4), (4, 4, 4)), ((6, 1, 2), (4, 2, 1))]:
            plan = cg.residue_plan(M, N, K, cg.KernelSpec(*u, 8, 8, 8))
            grid = np.zeros((M, N, K), dtype=np.int32)
            for reg in plan.regions:
                grid[reg.i0:reg.i1, reg.j0:reg.j1, reg.k0:reg.k1] += 1
            assert np.all(grid == 1), f"bad partition for {(M, N, K)} {u}"


class TestEmulation:
    @pytest.mark.parametrize("u,mnk", [
        ((1, 16, 1), (16, 16, 16)),
        ((2, 16, 2), (5, 17, 3)),
        ((4, 32, 2), (33, 47, 9)),
        ((2, 32, 4), (40, 40, 40)),
        ((1, 16, 2), (3, 5, 7)),
    ])
    def test_exact_vs_interpreter(self, u, mnk, rng):
        M, N, K = mnk
        A = random_float32(rng, (M, K))
        B = random_float32(rng, (K, N))
        C0 = random_float32(rng, (M, N))
        want = interpret_gemm(M, N, K, A, B, C0)
        got = C0.copy()
        cg.emulate_kernel(cg.kernel_spec_for(*u, M, N, K), A, B, got)
        assert np.array_equal(got, want)

    def test_zero_inputs_give_zero(self):
        Z = np.zeros((8, 8), dtype=np.float32)
        out = np.zeros((8, 8), dtype=np.float32)
        cg.emulate_kernel(cg.kernel_spec_for(2, 16, 2, 8, 8, 8), Z.copy(), Z.copy(), out)
        assert np.all(out == 0.0)

    def test_rejects_bad_spec(self):
        Z = np.zeros((4, 4), dtype=np.float32)
        with pytest.raises(cg.UnsupportedSpecError):
            cg.emulate_kernel(cg.KernelSpec(1, 4, 1, 4, 4, 4), Z, Z, Z.copy())


class TestHarness:
    def test_harness_text_contract(self):
        spec = cg.kernel_spec_for(2, 16, 2, 8, 8, 8)
        src = cg.emit_harness(spec, 8, 8, 8, repetitions=7)
        assert 'printf("GFLOPS: %.6f\\n", gflops);' in src
        assert "CORRECTNESS" in src
        assert "rep < 7" in src

    @pytest.mark.skipif(not (ev.toolchain_available() and ev.host_supports_avx512()),
                        reason="needs cc and AVX-512")
    def test_native_round_trip(self):
        spec = cg.kernel_spec_for(2, 16, 2, 33, 47, 9)
        result = ev.evaluate_native(spec, 33, 47, 9, repetitions=3)
        assert result.correctness_checked and result.gflops > 0

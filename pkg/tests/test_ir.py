import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from looptune import ir
from looptune.variants import ALL_ORDERS, interchange

from conftest import interpret_gemm, random_float32


class TestGemmNest:
    def test_iteration_space_cardinality(self):
        assert len(ir.enumerate_iterations(ir.gemm_nest(4, 4, 4))) == 64

    def test_benchmark_row_parameters(self):
        nest = ir.gemm_nest(128, 2048, 4096)
        assert dict(nest.params) == {"M": 128, "N": 2048, "K": 4096}

    def test_single_iteration_nest(self):
        nest = ir.gemm_nest(1, 1, 1)
        assert ir.enumerate_iterations(nest) == [(0, 0, 0)]
        A = np.array([[3.0]], dtype=np.float32)
        B = np.array([[5.0]], dtype=np.float32)
        C = np.array([[2.0]], dtype=np.float32)
        ir.interpret(nest, {"A": A, "B": B, "C": C})
        assert C[0, 0] == 2.0 + 3.0 * 5.0

    @pytest.mark.parametrize("bad", [(0, 1, 1), (1, -2, 1), (1, 1, 0)])
    def test_nonpositive_dimension_rejected(self, bad):
        with pytest.raises(ValueError):
            ir.gemm_nest(*bad)

    def test_is_canonical(self):
        assert ir.is_canonical_gemm(ir.gemm_nest(3, 4, 5))
        assert not ir.is_canonical_gemm(
            interchange(ir.gemm_nest(3, 4, 5), ("k", "j", "i")))


class TestInterpret:
    def test_identity_times_b(self, rng):
        A = np.eye(2, dtype=np.float32)
        B = random_float32(rng, (2, 2))
        C = interpret_gemm(2, 2, 2, A, B, np.zeros((2, 2), np.float32))
        assert np.array_equal(C, B)

    def test_all_ones(self):
        ones3 = np.ones((3, 3), dtype=np.float32)
        C = interpret_gemm(3, 3, 3, ones3, ones3, np.zeros((3, 3), np.float32))
        assert np.all(C == 3.0)

    def test_against_independent_naive_matmul(self, rng):
        M, N, K = 5, 6, 7
        A = random_float32(rng, (M, K))
        B = random_float32(rng, (K, N))
        got = interpret_gemm(M, N, K, A, B, np.zeros((M, N), np.float32))
        # Naive triple loop written here, independent of the interpreter.
        want = np.zeros((M, N), dtype=np.float32)
        for i in range(M):
            for j in range(N):
                for k in range(K):
                    want[i, j] = want[i, j] + A[i, k] * B[k, j]
        assert np.array_equal(got, want)

    def test_matches_naive_exactly_up_to_8(self, rng):
        for M, N, K in [(2, 3, 4), (8, 8, 8), (1, 8, 5), (7, 2, 6)]:
            A = random_float32(rng, (M, K))
            B = random_float32(rng, (K, N))
            C0 = random_float32(rng, (M, N))
            got = interpret_gemm(M, N, K, A, B, C0)
            want = C0.copy()
            for i in range(M):
                for j in range(N):
                    for k in range(K):
                        want[i, j] = want[i, j] + A[i, k] * B[k, j]
            assert np.array_equal(got, want)

    def test_out_of_bounds_is_analysis_bug(self):
        nest = ir.gemm_nest(2, 2, 2)
        small = {"A": np.zeros((1, 2), np.float32),
                 "B": np.zeros((2, 2), np.float32),
                 "C": np.zeros((2, 2), np.float32)}
        with pytest.raises(ir.AnalysisBugError):
            ir.interpret(nest, small)

    def test_requires_float32(self):
        nest = ir.gemm_nest(2, 2, 2)
        bufs = {"A": np.zeros((2, 2)), "B": np.zeros((2, 2), np.float32),
                "C": np.zeros((2, 2), np.float32)}
        with pytest.raises(ValueError):
            ir.interpret(nest, bufs)

    def test_interchange_within_fp_tolerance(self, rng):
        M = N = K = 8
        A = random_float32(rng, (M, K))
        B = random_float32(rng, (K, N))
        C0 = random_float32(rng, (M, N))
        want = interpret_gemm(M, N, K, A, B, C0)
        for order in ALL_ORDERS:
            nest = interchange(ir.gemm_nest(M, N, K), order)
            got = C0.copy()
            ir.interpret(nest, {"A": A, "B": B, "C": got})
            rel = np.abs(got - want) / np.maximum(np.abs(want), 1e-30)
            assert rel.max() <= 1e-5, f"order {order}: rel {rel.max()}"


class TestEnumerate:
    def test_two_by_one(self):
        assert ir.enumerate_iterations(ir.gemm_nest(2, 1, 1)) == [(0, 0, 0), (1, 0, 0)]

    def test_two_by_two(self):
        assert ir.enumerate_iterations(ir.gemm_nest(2, 2, 1)) == [
            (0, 0, 0), (0, 1, 0), (1, 0, 0), (1, 1, 0)]

    def test_three_cubed(self):
        its = ir.enumerate_iterations(ir.gemm_nest(3, 3, 3))
        assert len(its) == 27
        assert its[0] == (0, 0, 0) and its[-1] == (2, 2, 2)
        assert its == sorted(set(its))

    def test_cap_exceeded(self):
        with pytest.raises(ir.EnumerationCapError):
            ir.enumerate_iterations(ir.gemm_nest(100, 100, 100), cap=1000)

    @settings(max_examples=25, deadline=None, derandomize=True)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))
    def test_length_is_product_of_extents(self, M, N, K):
        assert len(ir.enumerate_iterations(ir.gemm_nest(M, N, K))) == M * N * K


class TestSerialization:
    def test_round_trip(self):
        nest = ir.gemm_nest(6, 7, 8)
        data = json.loads(json.dumps(ir.nest_to_json(nest)))
        assert ir.nest_from_json(data) == nest

    def test_round_trip_preserves_interpretation(self, rng):
        nest = ir.gemm_nest(3, 4, 5)
        back = ir.nest_from_json(ir.nest_to_json(nest))
        A = random_float32(rng, (3, 5))
        B = random_float32(rng, (5, 4))
        C1 = interpret_gemm(3, 4, 5, A, B, np.zeros((3, 4), np.float32))
        C2 = np.zeros((3, 4), np.float32)
        ir.interpret(back, {"A": A, "B": B, "C": C2})
        assert np.array_equal(C1, C2)

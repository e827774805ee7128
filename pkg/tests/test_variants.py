import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from looptune import ir, reuse, variants

from conftest import assert_working_sets_match_oracle, random_float32


def small_space(vals=(32, 64), orders=(("i", "j", "k"),)):
    return variants.SearchSpace(
        level1={d: tuple(vals) for d in "ijk"},
        level2={d: tuple(vals) for d in "ijk"},
        orders=tuple(orders),
    )


class TestGenerateVariants:
    def test_cross_product_count(self):
        out = variants.generate_variants(ir.gemm_nest(512, 512, 512), small_space())
        assert len(out) == 64
        assert len({desc for desc, _ in out}) == 64

    def test_degenerate_tiling_is_semantically_untiled(self, rng):
        M = N = K = 8
        nest = ir.gemm_nest(M, N, K)
        desc = variants.VariantDescriptor(order=("i", "j", "k"),
                                          tiles=(M, N, K, M, N, K))
        tiled = variants.build_tiled_nest(nest, desc)
        assert len(tiled.loops) == 9
        # Tile loops have a single iteration: same statement instances, same order.
        its = ir.enumerate_iterations(tiled)
        assert [v[-3:] for v in its] == ir.enumerate_iterations(nest)

    def test_clamped_last_tile(self):
        nest = ir.gemm_nest(100, 1, 1)
        desc = variants.VariantDescriptor(order=("i", "j", "k"),
                                          tiles=(32, 1, 1, 32, 1, 1))
        tiled = variants.build_tiled_nest(nest, desc)
        its = ir.enumerate_iterations(tiled)
        assert sorted({v[0] for v in its}) == [0, 32, 64, 96]
        assert len(its) == 100
        assert sorted({v[-3] for v in its}) == list(range(100))

    def test_empty_space_rejected(self):
        with pytest.raises(ValueError):
            variants.SearchSpace(level1={"i": (), "j": (32,), "k": (32,)},
                                 level2={d: (32,) for d in "ijk"},
                                 orders=(("i", "j", "k"),))

    def test_requires_canonical_nest(self):
        tiled = variants.build_tiled_nest(
            ir.gemm_nest(8, 8, 8),
            variants.VariantDescriptor(order=("i", "j", "k"), tiles=(4,) * 6))
        with pytest.raises(ValueError):
            variants.generate_variants(tiled, small_space())

    def test_duplicate_candidates_deduplicate(self):
        space = variants.SearchSpace(
            level1={d: (32, 32) for d in "ijk"},
            level2={d: (32,) for d in "ijk"},
            orders=(("i", "j", "k"),),
        )
        out = variants.generate_variants(ir.gemm_nest(64, 64, 64), space)
        assert len(out) == 1

    def test_nested_only_filter(self):
        space = variants.SearchSpace(
            level1={d: (32, 64) for d in "ijk"},
            level2={d: (32, 64) for d in "ijk"},
            orders=(("i", "j", "k"),),
            nested_only=True,
        )
        out = variants.generate_variants(ir.gemm_nest(512, 512, 512), space)
        assert len(out) == 27  # 3 legal (T1, T2) pairs per dimension

    def test_default_space_shape(self):
        space = variants.default_search_space()
        assert space.nested_only
        assert len(space.orders) == 6


class TestSemanticPreservation:
    @settings(max_examples=30, deadline=None, derandomize=True)
    @given(
        st.sampled_from(variants.ALL_ORDERS),
        st.tuples(*[st.integers(1, 9)] * 6),
    )
    def test_variant_matches_canonical(self, order, tiles):
        M = N = K = 8
        nest = ir.gemm_nest(M, N, K)
        desc = variants.VariantDescriptor(order=order, tiles=tiles)
        tiled = variants.build_tiled_nest(nest, desc)
        rng = np.random.default_rng(11)
        A = random_float32(rng, (M, K))
        B = random_float32(rng, (K, N))
        C0 = random_float32(rng, (M, N))
        want = C0.copy()
        ir.interpret(nest, {"A": A, "B": B, "C": want})
        got = C0.copy()
        ir.interpret(tiled, {"A": A, "B": B, "C": got})
        rel = np.abs(got - want) / np.maximum(np.abs(want), 1e-30)
        assert rel.max() <= 1e-5


class TestFeaturize:
    def test_identity_tiling_profile_equals_canonical(self):
        nest = ir.gemm_nest(4, 4, 4)
        cache = reuse.default_cache_hierarchy()
        desc = variants.VariantDescriptor(order=("i", "j", "k"), tiles=(4,) * 6)
        tiled_profile = variants.featurize(desc, nest, cache)
        canonical_profile = reuse.classify(reuse.working_set_records(nest), cache)
        assert tiled_profile == canonical_profile

    def test_profile_slot_sum_conserved(self):
        nest = ir.gemm_nest(32, 32, 32)
        cache = reuse.default_cache_hierarchy()
        desc = variants.VariantDescriptor(order=("j", "i", "k"),
                                          tiles=(16, 16, 16, 8, 8, 8))
        tiled = variants.build_tiled_nest(nest, desc)
        profile = variants.featurize(desc, nest, cache, tiled=tiled)
        total = sum(r.ws_max for r in
                    (reuse.working_set_records(tiled)))
        assert sum(profile.levels) == total

    def test_loop_order_changes_profile(self):
        # Same tiles, opposite orders: generally different working sets,
        # each verified against the enumeration oracle.
        M = N = K = 8
        nest = ir.gemm_nest(M, N, K)
        cache = reuse.default_cache_hierarchy()
        tiles = (4, 4, 4, 2, 2, 2)
        profiles = []
        for order in (("i", "j", "k"), ("k", "j", "i")):
            desc = variants.VariantDescriptor(order=order, tiles=tiles)
            tiled = variants.build_tiled_nest(nest, desc)
            assert_working_sets_match_oracle(tiled)
            profiles.append(variants.featurize(desc, nest, cache, tiled=tiled))
        assert profiles[0] != profiles[1]

    def test_variant_rows_shape(self):
        nest = ir.gemm_nest(64, 64, 64)
        cache = reuse.default_cache_hierarchy()
        generated = variants.generate_variants(nest, small_space(vals=(32,)))
        profiles = [variants.featurize(d, nest, cache, tiled=t)
                    for d, t in generated]
        rows = variants.variant_rows(generated, profiles)
        assert len(rows) == len(generated)
        assert all(len(r["features"]) == len(profiles[0].features()) for r in rows)
        assert len({r["id"] for r in rows}) == len(rows)


class TestInterchange:
    def test_interchange_reorders(self):
        nest = variants.interchange(ir.gemm_nest(2, 3, 4), ("k", "i", "j"))
        assert nest.iterators() == ("k", "i", "j")

    def test_interchange_rejects_dependent_bounds(self):
        tiled = variants.build_tiled_nest(
            ir.gemm_nest(8, 8, 8),
            variants.VariantDescriptor(order=("i", "j", "k"), tiles=(4,) * 6))
        with pytest.raises(ValueError):
            variants.interchange(tiled, tuple(tiled.iterators()[:3]))

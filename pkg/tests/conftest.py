import numpy as np
import pytest

from looptune import ir, reuse


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def oracle_bounds(nest, dep, structure=None):
    """Brute-force (ws_min, ws_max) for a dependence via the enumeration oracle."""
    if structure is None:
        structure = reuse.analyze_structure(nest)
    fi = structure.dim_index(dep.free_dim)
    origin = tuple(structure.lowers)
    first = tuple(v + (1 if i == fi else 0) for i, v in enumerate(origin))
    last = tuple(v + (structure.extents[fi] - 1 if i == fi else 0)
                 for i, v in enumerate(origin))
    return (reuse.working_set_oracle(nest, origin, first),
            reuse.working_set_oracle(nest, origin, last))


def assert_working_sets_match_oracle(nest):
    """Every non-empty dependence's analytical ws equals the oracle exactly."""
    structure = reuse.analyze_structure(nest)
    seen_maps = {}
    for dep in reuse.compute_dependences(nest):
        if dep.is_empty:
            continue
        rec = reuse.working_set(nest, dep, structure=structure)
        key = (dep.array, dep.free_dim)
        if key not in seen_maps:
            seen_maps[key] = oracle_bounds(nest, dep, structure)
        omin, omax = seen_maps[key]
        assert (rec.ws_min, rec.ws_max) == (omin, omax), (
            f"{dep.array} {dep.kind}: analytical ({rec.ws_min}, {rec.ws_max}) "
            f"!= oracle ({omin}, {omax})"
        )


def random_float32(rng, shape, lo=-0.5, hi=0.5):
    return (rng.random(shape, dtype=np.float32) * (hi - lo) + lo).astype(np.float32)


def interpret_gemm(M, N, K, A, B, C0):
    out = C0.copy()
    ir.interpret(ir.gemm_nest(M, N, K), {"A": A, "B": B, "C": out})
    return out

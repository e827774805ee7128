"""looptune: autotuning toolkit for matrix-multiplication loop nests.

Pipeline: analyze data reuse with working-set computation, enumerate tiled
loop variants, rank them with a trained pairwise comparator, generate
AVX-512 microkernel source, and tune unroll factors with reinforcement
learning against pluggable evaluators.
"""

__version__ = "0.1.0"

from .ir import gemm_nest, interpret, enumerate_iterations, LoopNest  # noqa: F401

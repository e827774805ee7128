"""Bundled GEMM benchmark suite.

Ten matrix-multiplication shapes drawn from deep-learning workloads (machine
translation, general workloads, language understanding, collaborative
filtering); the default problem set for the end-to-end pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class BenchmarkCase:
    workload: str
    application: str
    M: int
    N: int
    K: int

    @property
    def mnk(self) -> tuple[int, int, int]:
        return (self.M, self.N, self.K)


BENCHMARK_SUITE: tuple[BenchmarkCase, ...] = (
    BenchmarkCase("GNMT", "Machine translation", 128, 2048, 4096),
    BenchmarkCase("GNMT", "Machine translation", 320, 3072, 4096),
    BenchmarkCase("GNMT", "Machine translation", 1632, 36548, 1024),
    BenchmarkCase("GNMT", "Machine translation", 2048, 4096, 32),
    BenchmarkCase("DeepBench", "General workload", 1024, 16, 500000),
    BenchmarkCase("DeepBench", "General workload", 35, 8457, 2560),
    BenchmarkCase("Transformer", "Language Understanding", 31999, 1024, 84),
    BenchmarkCase("Transformer", "Language Understanding", 84, 1024, 4096),
    BenchmarkCase("NCF", "Collaborative Filtering", 2048, 1, 128),
    BenchmarkCase("NCF", "Collaborative Filtering", 256, 256, 2048),
)


def suite_sizes() -> list[tuple[int, int, int]]:
    return [case.mnk for case in BENCHMARK_SUITE]

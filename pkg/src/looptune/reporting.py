"""Run reports: delimited summaries, figures, and the artifact manifest.

Report writers are deterministic byte-for-byte: JSON is dumped with sorted
keys, CSV rows use repr-stable float formatting, and figures are rendered
through the Agg backend with fixed metadata so a rerun with the same seed
reproduces identical files.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: str, data) -> None:
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def write_jsonl(path: str, rows) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True))
            f.write("\n")


def write_report_csv(path: str, rows: list[dict]) -> None:
    """Per-problem-size summary, one row per size."""
    fields = ["M", "N", "K", "variant", "u_i", "u_j", "u_k", "backend",
              "gflops", "baseline_gflops", "speedup", "correctness_checked"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})


def _save(fig, path: str) -> None:
    fig.savefig(path, dpi=110, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def speedup_figure(path: str, rows: list[dict]) -> None:
    """Bar chart of tuned speed-up over the scalar baseline per problem size."""
    labels = [f"{r['M']}x{r['N']}x{r['K']}" for r in rows]
    speedups = [r["speedup"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(rows)), 3.6))
    ax.bar(range(len(rows)), speedups, color="#33679a")
    ax.axhline(1.0, color="black", linewidth=0.8)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("speed-up vs scalar baseline")
    ax.set_title("Tuned kernel speed-up per GEMM size")
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    _save(fig, path)


def rl_trace_figure(path: str, log_rows: list[dict], title: str) -> None:
    """Best-so-far performance across the RL search."""
    perfs = [row["perf"] for row in log_rows]
    best = []
    cur = float("-inf")
    for p in perfs:
        cur = max(cur, p)
        best.append(cur)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(best, color="#b2502a", linewidth=1.2, label="best so far")
    ax.plot(perfs, color="#33679a", linewidth=0.5, alpha=0.55, label="visited")
    ax.set_xlabel("search step")
    ax.set_ylabel("modeled GFLOPS")
    ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    _save(fig, path)


def profile_figure(path: str, slot_names, rows: list[dict]) -> None:
    """Working-set mass per cache slot for the analyzed dependences."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    arrays = [r["array"] + ":" + r["kind"] for r in rows]
    ws_max = [r["ws_max"] for r in rows]
    ws_min = [r["ws_min"] for r in rows]
    x = range(len(rows))
    ax.bar([i - 0.2 for i in x], ws_min, width=0.4, label="ws_min", color="#33679a")
    ax.bar([i + 0.2 for i in x], ws_max, width=0.4, label="ws_max", color="#b2502a")
    ax.set_yscale("log")
    ax.set_xticks(list(x))
    ax.set_xticklabels(arrays, fontsize=8)
    ax.set_ylabel("working set (elements)")
    ax.set_title("Working-set sizes per data reuse")
    ax.legend(frameon=False, fontsize=8)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    _save(fig, path)


def build_manifest(out_dir: str, exclude: tuple[str, ...] = ()) -> list[dict]:
    """Hash every file under out_dir (relative paths, sorted)."""
    entries = []
    for root, _, files in os.walk(out_dir):
        for name in sorted(files):
            path = os.path.join(root, name)
            rel = os.path.relpath(path, out_dir)
            if rel in exclude:
                continue
            entries.append({
                "path": rel.replace(os.sep, "/"),
                "bytes": os.path.getsize(path),
                "sha256": sha256_file(path),
            })
    entries.sort(key=lambda e: e["path"])
    return entries

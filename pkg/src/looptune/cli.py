"""Command-line pipeline: analyze -> variants -> rank -> tune -> emit/bench.

Subcommands: analyze, variants, train-ranker, rank, tune, codegen, bench,
pipeline.  All stochastic stages draw from one seeded generator per stage, so
a rerun of the pipeline with the same config, seed and the analytic backend
reproduces every artifact byte for byte.

Exit codes: 0 success, 2 config error, 3 stage failure, 4 correctness failure.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__, codegen, evaluator, ranker, reporting, rl, suite, variants
from .evaluator import CodegenBugError, MiscompileError
from .ir import gemm_nest, is_canonical_gemm, nest_from_json, nest_to_json
from .reuse import (
    CacheHierarchy,
    CacheLevel,
    EmptyDependenceError,
    analyze_structure,
    canonical_gemm_formulas,
    classify,
    compute_dependences,
    default_cache_hierarchy,
    working_set,
)


class ConfigError(Exception):
    """Invalid configuration; reported before any stage runs."""


class StageError(Exception):
    """A pipeline stage failed; message carries the stage tag."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Configuration

DEFAULT_LADDERS = {"i": [1, 2, 4, 8], "j": [16, 32, 48, 64], "k": [1, 2, 4]}

CONFIG_SCHEMA = {
    "problem_sizes": "list of [M, N, K] triples, or the string 'suite'",
    "cache": "{levels: [{name, capacity_bytes}...], element_bytes}",
    "search_space": "{level1: {i,j,k: [ints]}, level2: {...}, orders: [[i,j,k]...], "
                    "nested_only: bool}",
    "ranker": "{hidden, theta, learning_rate, momentum, epochs, batch_size, "
              "train_fraction, max_pairs}",
    "rl": "{epsilon0, decay, epsilon_min, gamma, episodes, steps_per_episode, "
          "replay_capacity, batch_size, learning_rate, hidden, dropout, ladders}",
    "evaluator": "{backend: analytic|native, repetitions, average}",
    "top_fraction": "float in (0, 1]",
    "output_dir": "path",
    "seed": "int",
    "workers": "int >= 1",
}


def default_config() -> dict:
    return {
        "problem_sizes": "suite",
        "cache": {
            "levels": [
                {"name": "L1", "capacity_bytes": 32 * 1024},
                {"name": "L2", "capacity_bytes": 1024 * 1024},
                {"name": "L3", "capacity_bytes": 39 * 1024 * 1024},
            ],
            "element_bytes": 4,
        },
        "search_space": {
            "level1": {d: [32, 64, 128] for d in "ijk"},
            "level2": {d: [32, 64] for d in "ijk"},
            "orders": [["i", "j", "k"], ["j", "k", "i"]],
            "nested_only": True,
        },
        "ranker": {
            "hidden": [64, 32], "theta": 0.7, "learning_rate": 1e-3,
            "momentum": 0.9, "epochs": 200, "batch_size": 32,
            "train_fraction": 0.7, "max_pairs": 1500,
        },
        "rl": {
            "epsilon0": 1.0, "decay": 0.9, "epsilon_min": 0.05, "gamma": 0.9,
            "episodes": 30, "steps_per_episode": 8, "replay_capacity": 2048,
            "batch_size": 32, "learning_rate": 1e-3, "hidden": [64, 64],
            "dropout": 0.25, "ladders": DEFAULT_LADDERS,
        },
        "evaluator": {"backend": "analytic", "repetitions": 100,
                      "average": "median_of_means", "compiler_cmd": None},
        "top_fraction": 0.10,
        "output_dir": "looptune-out",
        "seed": 0,
        "workers": 1,
    }


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def validate_config(cfg: dict) -> dict:
    """Schema-check a pipeline config, filling defaults for missing sections."""
    _require(isinstance(cfg, dict), "config must be a JSON object")
    unknown = set(cfg) - set(CONFIG_SCHEMA)
    _require(not unknown, f"unknown config keys {sorted(unknown)}; "
                          f"known keys: {sorted(CONFIG_SCHEMA)}")
    merged = default_config()
    for key, value in cfg.items():
        if isinstance(merged.get(key), dict) and isinstance(value, dict):
            section = dict(merged[key])
            bad = set(value) - set(section)
            _require(not bad, f"unknown keys {sorted(bad)} in config section {key!r}")
            section.update(value)
            merged[key] = section
        else:
            merged[key] = value

    sizes = merged["problem_sizes"]
    if sizes == "suite":
        merged["problem_sizes"] = [list(t) for t in suite.suite_sizes()]
    else:
        _require(isinstance(sizes, list) and sizes, "problem_sizes must be non-empty")
        for t in sizes:
            _require(isinstance(t, list) and len(t) == 3
                     and all(isinstance(v, int) and v >= 1 for v in t),
                     f"problem size {t} must be three positive integers")

    cache = merged["cache"]
    _require(isinstance(cache.get("levels"), list) and cache["levels"],
             "cache.levels must be a non-empty list")
    for lvl in cache["levels"]:
        _require(isinstance(lvl, dict) and isinstance(lvl.get("name"), str)
                 and isinstance(lvl.get("capacity_bytes"), int)
                 and lvl["capacity_bytes"] > 0,
                 f"bad cache level {lvl}")
    caps = [l["capacity_bytes"] for l in cache["levels"]]
    _require(all(b > a for a, b in zip(caps, caps[1:])),
             f"cache capacities must strictly increase: {caps}")
    _require(isinstance(cache.get("element_bytes", 4), int)
             and cache.get("element_bytes", 4) >= 1, "bad cache.element_bytes")

    space = merged["search_space"]
    for level in ("level1", "level2"):
        _require(isinstance(space.get(level), dict), f"search_space.{level} missing")
        for d in "ijk":
            vals = space[level].get(d)
            _require(isinstance(vals, list) and vals
                     and all(isinstance(v, int) and v >= 1 for v in vals),
                     f"search_space.{level}.{d} must list positive integers")
    _require(isinstance(space.get("orders"), list) and space["orders"],
             "search_space.orders must be non-empty")
    for order in space["orders"]:
        _require(sorted(order) == ["i", "j", "k"],
                 f"order {order} must permute ['i','j','k']")

    rk = merged["ranker"]
    _require(0.5 < rk["theta"] <= 1.0, "ranker.theta must be in (0.5, 1]")
    _require(0.0 < rk["train_fraction"] < 1.0,
             "ranker.train_fraction must be in (0, 1)")
    _require(rk["epochs"] >= 1 and rk["batch_size"] >= 1, "bad ranker epochs/batch")

    rlc = merged["rl"]
    _require(0.0 <= rlc["epsilon0"] <= 1.0 and 0.0 <= rlc["epsilon_min"] <= 1.0,
             "rl epsilon bounds must lie in [0, 1]")
    _require(0.0 < rlc["decay"] < 1.0, "rl.decay must lie in (0, 1)")
    _require(0.0 <= rlc["gamma"] <= 1.0, "rl.gamma must lie in [0, 1]")
    for d in "ijk":
        vals = rlc["ladders"].get(d)
        _require(isinstance(vals, list) and vals, f"rl.ladders.{d} must be non-empty")
    _require(all(v % codegen.VECTOR_LANES == 0 for v in rlc["ladders"]["j"]),
             f"rl.ladders.j entries must be multiples of {codegen.VECTOR_LANES}")

    _require(merged["evaluator"]["backend"] in ("analytic", "native"),
             "evaluator.backend must be 'analytic' or 'native'")
    cc_cmd = merged["evaluator"].get("compiler_cmd")
    if cc_cmd is not None:
        _require(isinstance(cc_cmd, list) and all(isinstance(s, str) for s in cc_cmd)
                 and any("{src}" in s for s in cc_cmd)
                 and any("{out}" in s for s in cc_cmd),
                 "evaluator.compiler_cmd must be a string list with {src} and {out}")
    _require(merged["evaluator"]["average"] in ("median_of_means", "mean"),
             "evaluator.average must be 'median_of_means' or 'mean'")
    _require(0.0 < merged["top_fraction"] <= 1.0, "top_fraction must be in (0, 1]")
    _require(isinstance(merged["seed"], int), "seed must be an integer")
    _require(isinstance(merged["workers"], int) and merged["workers"] >= 1,
             "workers must be a positive integer")
    return merged


def load_config(path: str) -> dict:
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return validate_config(raw)


def config_hash(cfg: dict) -> str:
    """Hash of the config with run-location fields normalized away."""
    stripped = {k: v for k, v in cfg.items() if k != "output_dir"}
    blob = json.dumps(stripped, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def cache_from_config(cfg: dict) -> CacheHierarchy:
    return CacheHierarchy(
        levels=tuple(CacheLevel(l["name"], l["capacity_bytes"])
                     for l in cfg["cache"]["levels"]),
        element_bytes=cfg["cache"].get("element_bytes", 4),
    )


def space_from_config(cfg: dict) -> variants.SearchSpace:
    sp = cfg["search_space"]
    return variants.SearchSpace(
        level1={d: tuple(sp["level1"][d]) for d in "ijk"},
        level2={d: tuple(sp["level2"][d]) for d in "ijk"},
        orders=tuple(tuple(o) for o in sp["orders"]),
        nested_only=bool(sp.get("nested_only", False)),
    )


def rl_config_from(cfg: dict, seed: int) -> rl.RLConfig:
    rlc = cfg["rl"]
    return rl.RLConfig(
        epsilon0=rlc["epsilon0"], decay=rlc["decay"],
        epsilon_min=rlc["epsilon_min"], gamma=rlc["gamma"],
        episodes=rlc["episodes"], steps_per_episode=rlc["steps_per_episode"],
        replay_capacity=rlc["replay_capacity"], batch_size=rlc["batch_size"],
        learning_rate=rlc["learning_rate"], hidden=tuple(rlc["hidden"]),
        dropout=rlc["dropout"], seed=seed,
    )


def ladders_from(cfg: dict) -> rl.Ladders:
    lad = cfg["rl"]["ladders"]
    return rl.Ladders(i=tuple(lad["i"]), j=tuple(lad["j"]), k=tuple(lad["k"]))


# ---------------------------------------------------------------------------
# analyze

def _parse_gemm(text: str) -> tuple[int, int, int]:
    try:
        parts = [int(p) for p in text.replace("x", ",").split(",")]
    except ValueError:
        raise ConfigError(f"cannot parse GEMM size {text!r}; expected M,N,K")
    if len(parts) != 3 or any(p < 1 for p in parts):
        raise ConfigError(f"GEMM size needs three positive integers, got {text!r}")
    return tuple(parts)


def analysis_rows(nest, cache: CacheHierarchy) -> tuple[list[dict], list[str]]:
    """Per-dependence working-set rows plus human-readable notes."""
    structure = analyze_structure(nest)
    formulas = canonical_gemm_formulas() if is_canonical_gemm(nest) else {}
    rows, notes = [], []
    loops = nest.iterators()
    for dep in compute_dependences(nest, structure=structure):
        if dep.is_empty:
            notes.append(
                f"{dep.array} {dep.kind} reuse {dep.constraint}: no instances "
                f"(loop {dep.free_dim} has a single iteration); skipped"
            )
            continue
        rec = working_set(nest, dep, structure=structure)
        sym = formulas.get(dep.array)
        profile = classify([rec], cache)
        level = next((name for name, count in zip(profile.slot_names, profile.levels)
                      if count), profile.slot_names[-1])
        rows.append({
            "array": dep.array,
            "kind": dep.kind,
            "carried_by": loops[dep.carrying_loop],
            "constraint": dep.constraint,
            "ws_min": rec.ws_min,
            "ws_max": rec.ws_max,
            "ws_min_formula": sym.ws_min_formula if sym else "",
            "ws_max_formula": sym.ws_max_formula if sym else "",
            "level": level,
            "per_array": dict(rec.per_array),
        })
    return rows, notes


def cmd_analyze(args) -> int:
    if args.nest:
        try:
            with open(args.nest) as f:
                nest = nest_from_json(json.load(f))
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as e:
            raise ConfigError(f"cannot load nest {args.nest}: {e}")
    else:
        M, N, K = _parse_gemm(args.gemm)
        nest = gemm_nest(M, N, K)
    cache = cache_from_config(validate_config({})) if not args.config \
        else cache_from_config(load_config(args.config))
    try:
        rows, notes = analysis_rows(nest, cache)
    except Exception as e:
        raise StageError("analyze", str(e))

    params = dict(nest.params)
    print(f"working-set analysis: " +
          " ".join(f"{k}={v}" for k, v in sorted(params.items())))
    for row in rows:
        sym = ""
        if row["ws_min_formula"]:
            sym = (f"  [ws_min = {row['ws_min_formula']}, "
                   f"ws_max = {row['ws_max_formula']}]")
        print(f"  {row['array']} {row['kind']:>3} reuse carried by {row['carried_by']}: "
              f"ws_min={row['ws_min']} ws_max={row['ws_max']} -> {row['level']}{sym}")
        print(f"      {row['constraint']}")
    for note in notes:
        print(f"  note: {note}")

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        reporting.write_json(os.path.join(args.out, "analyze.json"),
                             {"parameters": params, "rows": rows, "notes": notes})
        import csv
        with open(os.path.join(args.out, "analyze.csv"), "w", newline="") as f:
            fields = ["array", "kind", "carried_by", "ws_min", "ws_max",
                      "ws_min_formula", "ws_max_formula", "level"]
            writer = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(rows)
        if rows:
            reporting.profile_figure(os.path.join(args.out, "working_sets.png"),
                                     cache.slot_names, rows)
        print(f"wrote {args.out}/analyze.json, analyze.csv, working_sets.png")
    return 0


# ---------------------------------------------------------------------------
# variants / measurements

def _measure_variants(cfg: dict, mnk: tuple[int, int, int]) -> list[dict]:
    """Featurize every variant of one problem size and attach measured perf.

    Featurization is pure per variant, so it fans out over the configured
    worker count with order preserved.
    """
    M, N, K = mnk
    nest = gemm_nest(M, N, K)
    cache = cache_from_config(cfg)
    space = space_from_config(cfg)
    generated = variants.generate_variants(nest, space)

    def one(pair):
        desc, tiled = pair
        return variants.featurize(desc, nest, cache, tiled=tiled)

    workers = cfg.get("workers", 1)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            profiles = list(pool.map(one, generated))
    else:
        profiles = [one(pair) for pair in generated]

    rows = []
    for (desc, _), profile in zip(generated, profiles):
        perf = evaluator.evaluate_variant_analytic(profile, M, N, K).gflops
        rows.append({
            "id": desc.vid,
            "order": list(desc.order),
            "tiles": list(desc.tiles),
            "slots": list(profile.slot_names),
            "features": list(profile.features()),
            "perf": perf,
        })
    return rows


def cmd_variants(args) -> int:
    cfg = load_config(args.config) if args.config else validate_config({})
    mnk = _parse_gemm(args.gemm)
    try:
        rows = _measure_variants(cfg, mnk)
    except Exception as e:
        raise StageError("variants", str(e))
    payload = {"problem_size": list(mnk), "variants": rows}
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        reporting.write_json(args.out, payload)
        print(f"wrote {len(rows)} variants to {args.out}")
    else:
        json.dump(payload, sys.stdout, indent=2, sort_keys=True)
        print()
    return 0


# ---------------------------------------------------------------------------
# ranker training / ranking

def _split_and_pairs(sizes_rows: dict[str, list[dict]], train_fraction: float,
                     max_pairs: int, rng: np.random.Generator):
    """70/30 variant split per problem size; labeled pairs within each side."""
    train_pairs, eval_pairs = [], []
    for key in sorted(sizes_rows):
        rows = sizes_rows[key]
        order = rng.permutation(len(rows))
        cut = max(1, int(round(train_fraction * len(rows))))
        if len(rows) >= 2:
            cut = min(cut, len(rows) - 1)
        train_rows = [rows[i] for i in order[:cut]]
        eval_rows = [rows[i] for i in order[cut:]]

        def pairs_of(rows_side):
            out = []
            for a, b in itertools.combinations(rows_side, 2):
                if a["perf"] == b["perf"]:
                    continue
                label = 1 if a["perf"] > b["perf"] else 2
                out.append((a["features"], b["features"], label))
            return out

        tp = pairs_of(train_rows)
        if len(tp) > max_pairs:
            sel = rng.choice(len(tp), size=max_pairs, replace=False)
            tp = [tp[i] for i in sorted(sel)]
        train_pairs.extend(tp)
        eval_pairs.extend(pairs_of(eval_rows))
    return train_pairs, eval_pairs


def _train_ranker(cfg: dict, sizes_rows: dict[str, list[dict]], seed: int):
    all_rows = [r for rows in sizes_rows.values() for r in rows]
    if len(all_rows) < 2:
        raise ConfigError("ranker training needs at least 2 variants")
    rk = cfg["ranker"]
    rng = np.random.default_rng(seed)
    scaler = ranker.fit_scaler([r["features"] for r in all_rows])
    train_pairs, eval_pairs = _split_and_pairs(
        sizes_rows, rk["train_fraction"], rk["max_pairs"], rng)
    if not train_pairs:
        raise ConfigError("no usable training pairs (all measured ties?)")
    model = ranker.ComparatorModel(
        feature_dim=len(all_rows[0]["features"]), hidden=tuple(rk["hidden"]),
        theta=rk["theta"], seed=seed,
    )
    tc = ranker.TrainConfig(
        learning_rate=rk["learning_rate"], momentum=rk["momentum"],
        epochs=rk["epochs"], batch_size=rk["batch_size"], seed=seed,
    )
    model, history = ranker.train(model, scaler, train_pairs, tc)
    accuracy = ranker.pairwise_accuracy(model, scaler, eval_pairs) \
        if eval_pairs else float("nan")
    summary = {
        "train_pairs": len(train_pairs),
        "eval_pairs": len(eval_pairs),
        "loss_first": history[0],
        "loss_last": history[-1],
        "held_out_pairwise_accuracy": accuracy,
    }
    return model, scaler, summary


def cmd_train_ranker(args) -> int:
    cfg = load_config(args.config) if args.config else validate_config({})
    try:
        with open(args.measurements) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read measurements {args.measurements}: {e}")
    if "variants" in data and isinstance(data["variants"], list):
        sizes_rows = {"x".join(str(v) for v in data.get("problem_size", (0, 0, 0))):
                      data["variants"]}
    else:
        sizes_rows = data.get("sizes", {})
    total = sum(len(rows) for rows in sizes_rows.values())
    if total < 2:
        raise ConfigError(f"need at least 2 measured variants, got {total}")
    seed = args.seed if args.seed is not None else cfg["seed"]
    try:
        model, scaler, summary = _train_ranker(cfg, sizes_rows, seed)
    except ConfigError:
        raise
    except Exception as e:
        raise StageError("train-ranker", str(e))
    model.save(args.out, scaler)
    print(f"trained comparator on {summary['train_pairs']} pairs; "
          f"loss {summary['loss_first']:.4f} -> {summary['loss_last']:.4f}; "
          f"held-out pairwise accuracy "
          f"{summary['held_out_pairwise_accuracy']:.3f}")
    print(f"wrote model to {args.out}")
    return 0


def cmd_rank(args) -> int:
    try:
        with open(args.variants) as f:
            data = json.load(f)
        model, scaler = ranker.ComparatorModel.load(args.model)
    except (OSError, json.JSONDecodeError, ValueError, KeyError) as e:
        raise ConfigError(f"cannot load inputs: {e}")
    if scaler is None:
        raise ConfigError(f"model {args.model} does not embed a feature scaler")
    rows = data["variants"] if isinstance(data, dict) else data
    try:
        ranked = ranker.tournament_rank(
            model, scaler, [(r["id"], r["features"]) for r in rows])
        top = ranker.select_top(ranked, args.top_fraction)
    except Exception as e:
        raise StageError("rank", str(e))
    payload = {
        "ranking": [{"id": vid, "wins": wins} for vid, wins in ranked],
        "selected": [{"id": vid, "wins": wins} for vid, wins in top],
        "top_fraction": args.top_fraction,
    }
    if args.out:
        reporting.write_json(args.out, payload)
        print(f"ranked {len(ranked)} variants; selected top {len(top)} -> {args.out}")
    else:
        json.dump(payload, sys.stdout, indent=2, sort_keys=True)
        print()
    return 0


# ---------------------------------------------------------------------------
# tune / codegen / bench

def _compiler_cmd(cfg: dict):
    custom = cfg["evaluator"].get("compiler_cmd")
    return tuple(custom) if custom else evaluator.DEFAULT_COMPILER_CMD


def _kernel_evaluator(cfg: dict, mnk: tuple[int, int, int]):
    M, N, K = mnk
    backend = cfg["evaluator"]["backend"]

    def analytic(unrolls):
        spec = codegen.kernel_spec_for(*unrolls, M, N, K)
        return evaluator.evaluate_analytic(spec, M, N, K).gflops

    def native(unrolls):
        spec = codegen.kernel_spec_for(*unrolls, M, N, K)
        return evaluator.evaluate_native(
            spec, M, N, K, repetitions=cfg["evaluator"]["repetitions"],
            average=cfg["evaluator"]["average"],
            compiler_cmd=_compiler_cmd(cfg)).gflops

    return analytic if backend == "analytic" else native


def cmd_tune(args) -> int:
    cfg = load_config(args.config) if args.config else validate_config({})
    if args.backend:
        cfg["evaluator"]["backend"] = args.backend
    mnk = _parse_gemm(args.gemm)
    seed = args.seed if args.seed is not None else cfg["seed"]
    rl_cfg = rl_config_from(cfg, seed)
    if args.episodes:
        rl_cfg.episodes = args.episodes
    try:
        result = rl.tune(_kernel_evaluator(cfg, mnk), rl_cfg,
                         ladders=ladders_from(cfg), problem=mnk)
    except rl.NoFeasibleKernelError as e:
        raise StageError("tune", str(e))
    print(f"best unroll factors {result.best_unrolls}: "
          f"{result.best_perf:.3f} GFLOPS ({cfg['evaluator']['backend']})")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        reporting.write_jsonl(os.path.join(args.out, "rl_log.jsonl"), result.log)
        reporting.write_json(os.path.join(args.out, "best_spec.json"), {
            "u_i": result.best_unrolls[0], "u_j": result.best_unrolls[1],
            "u_k": result.best_unrolls[2], "problem_size": list(mnk),
            "performance": result.best_perf,
            "backend": cfg["evaluator"]["backend"],
        })
        result.network.save(os.path.join(args.out, "policy_weights.json"))
        reporting.rl_trace_figure(
            os.path.join(args.out, "rl_trace.png"), result.log,
            f"RL unroll search, {mnk[0]}x{mnk[1]}x{mnk[2]}")
        print(f"wrote {args.out}/rl_log.jsonl, best_spec.json, "
              f"policy_weights.json, rl_trace.png")
    return 0


def cmd_codegen(args) -> int:
    mnk = _parse_gemm(args.gemm)
    source = None
    if args.scalar:
        source = codegen.emit_scalar_kernel(*mnk)
    else:
        u = _parse_gemm(args.spec) if args.spec else (1, 16, 1)
        spec = codegen.kernel_spec_for(*u, *mnk)
        try:
            source = codegen.emit_vector_kernel(spec)
        except (codegen.RegisterPressureError, codegen.UnsupportedSpecError) as e:
            raise StageError("codegen", str(e))
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w") as f:
            f.write(source)
        print(f"wrote {args.out}")
    else:
        print(source)
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config) if args.config else validate_config({})
    if args.backend:
        cfg["evaluator"]["backend"] = args.backend
    mnk = _parse_gemm(args.gemm)
    u = _parse_gemm(args.spec) if args.spec else (1, 16, 1)
    spec = codegen.kernel_spec_for(*u, *mnk)
    backend = cfg["evaluator"]["backend"]
    reps = args.repetitions or cfg["evaluator"]["repetitions"]
    try:
        if backend == "native":
            if not evaluator.toolchain_available(_compiler_cmd(cfg)):
                raise StageError("bench", "no C compiler on PATH")
            result = evaluator.evaluate_native(
                spec, *mnk, repetitions=reps, average=cfg["evaluator"]["average"],
                compiler_cmd=_compiler_cmd(cfg))
            baseline = evaluator.evaluate_native(
                spec, *mnk, repetitions=max(5, reps // 10),
                compiler_cmd=("cc", "-O3", "-o", "{out}", "{src}", "-lm"),
                scalar_only=True)
        else:
            result = evaluator.evaluate_analytic(spec, *mnk)
            baseline = evaluator.scalar_baseline_analytic(*mnk)
    except MiscompileError:
        raise
    except evaluator.InfeasibleSpecError as e:
        raise StageError("bench", str(e))
    except evaluator.ToolchainError as e:
        raise StageError("bench", str(e))
    print(f"kernel ({u[0]},{u[1]},{u[2]}) at {mnk[0]}x{mnk[1]}x{mnk[2]} "
          f"[{backend}]: {result.gflops:.3f} GFLOPS")
    print(f"scalar baseline: {baseline.gflops:.3f} GFLOPS; "
          f"speed-up {result.gflops / baseline.gflops:.2f}x")
    return 0


# ---------------------------------------------------------------------------
# pipeline

def _probe_correctness(unrolls: tuple[int, int, int],
                       mnk: tuple[int, int, int]) -> bool:
    """Lane-exact emulation check of the chosen spec at a bounded probe size."""
    M = min(mnk[0], 3 * unrolls[0] + 1)
    N = max(min(mnk[1], 3 * unrolls[1] + 1), 1)
    K = min(mnk[2], 3 * unrolls[2] + 1)
    spec = codegen.kernel_spec_for(*unrolls, M, N, K)
    return evaluator.evaluate_interpreted(spec, M, N, K)


def cmd_pipeline(args) -> int:
    if args.emit_config:
        reporting.write_json(args.emit_config, default_config())
        print(f"wrote default config to {args.emit_config}")
        return 0
    if not args.config:
        raise ConfigError("pipeline requires --config PATH (or --emit-config)")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.backend:
        cfg["evaluator"]["backend"] = args.backend
    if args.out:
        cfg["output_dir"] = args.out
    if args.top_fraction:
        cfg["top_fraction"] = args.top_fraction
    backend = cfg["evaluator"]["backend"]
    if backend == "native":
        if not evaluator.toolchain_available():
            raise ConfigError("native backend requested but no C compiler on PATH")
        if not evaluator.host_supports_avx512():
            raise ConfigError("native backend requested but host lacks AVX-512")

    out_dir = cfg["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    fig_dir = os.path.join(out_dir, "figures")
    kern_dir = os.path.join(out_dir, "kernels")
    os.makedirs(fig_dir, exist_ok=True)
    os.makedirs(kern_dir, exist_ok=True)
    seed = cfg["seed"]
    sizes = [tuple(t) for t in cfg["problem_sizes"]]

    # Stage 1: variants + features + measured (modeled) performance.
    sizes_rows: dict[str, list[dict]] = {}
    try:
        for mnk in sizes:
            key = "x".join(str(v) for v in mnk)
            sizes_rows[key] = _measure_variants(cfg, mnk)
        reporting.write_json(os.path.join(out_dir, "measurements.json"),
                             {"sizes": sizes_rows})
    except Exception as e:
        raise StageError("variants", str(e))

    # Stage 2: train the pairwise comparator.  Degenerate spaces (a single
    # variant, or all-tied measurements) skip ranking and keep generation order.
    model = scaler = None
    try:
        model, scaler, ranker_summary = _train_ranker(cfg, sizes_rows, seed)
        model.save(os.path.join(out_dir, "ranker_model.json"), scaler)
    except ConfigError as e:
        ranker_summary = {"skipped": str(e)}
    except ranker.TrainingDivergedError as e:
        raise StageError("train-ranker", str(e))
    except Exception as e:
        raise StageError("train-ranker", str(e))

    # Stage 3 + 4: per size, tournament rank, select top fraction, RL-tune.
    ladders = ladders_from(cfg)
    report_rows = []
    for si, mnk in enumerate(sizes):
        key = "x".join(str(v) for v in mnk)
        rows = sizes_rows[key]
        try:
            if model is None:
                ranked = [(r["id"], 0) for r in rows]
            else:
                ranked = ranker.tournament_rank(
                    model, scaler, [(r["id"], r["features"]) for r in rows])
            selected = ranker.select_top(ranked, cfg["top_fraction"])
        except Exception as e:
            raise StageError("rank", str(e))
        reporting.write_json(os.path.join(out_dir, f"ranked_{key}.json"), {
            "ranking": [{"id": vid, "wins": wins} for vid, wins in ranked],
            "selected": [vid for vid, _ in selected],
        })

        by_id = {r["id"]: r for r in rows}
        best_choice = None
        fallback_reason = None
        for vi, (vid, _) in enumerate(selected):
            rl_seed = seed * 1_000_003 + si * 1009 + vi
            rl_cfg = rl_config_from(cfg, rl_seed)
            try:
                result = rl.tune(_kernel_evaluator(cfg, mnk), rl_cfg,
                                 ladders=ladders, problem=mnk)
            except rl.NoFeasibleKernelError as e:
                fallback_reason = str(e)
                break
            except (evaluator.ToolchainError, MiscompileError):
                raise
            if best_choice is None or result.best_perf > best_choice[1].best_perf:
                best_choice = (vid, result)

        M, N, K = mnk
        if best_choice is None:
            # No vectorizable kernel (e.g. N < vector width): scalar fallback.
            base = (evaluator.scalar_baseline_analytic(M, N, K)
                    if backend == "analytic" else
                    evaluator.evaluate_native(
                        codegen.kernel_spec_for(1, 16, 1, M, N, K), M, N, K,
                        repetitions=max(5, cfg["evaluator"]["repetitions"] // 10),
                        compiler_cmd=("cc", "-O3", "-o", "{out}", "{src}", "-lm"),
                        scalar_only=True))
            top_id = selected[0][0]
            scalar_path = os.path.join(kern_dir, f"gemm_{key}_scalar.c")
            with open(scalar_path, "w") as f:
                f.write(codegen.emit_scalar_kernel(M, N, K))
            report_rows.append({
                "M": M, "N": N, "K": K, "variant": top_id,
                "u_i": 1, "u_j": 1, "u_k": 1, "backend": backend,
                "gflops": base.gflops, "baseline_gflops": base.gflops,
                "speedup": 1.0, "correctness_checked": True,
                "kernel_file": os.path.relpath(scalar_path, out_dir),
                "note": f"scalar fallback: {fallback_reason}",
            })
            continue

        vid, result = best_choice
        try:
            checked = _probe_correctness(result.best_unrolls, mnk)
        except CodegenBugError:
            raise
        spec = codegen.kernel_spec_for(*result.best_unrolls, M, N, K)
        kernel_path = os.path.join(kern_dir, f"gemm_{key}.c")
        with open(kernel_path, "w") as f:
            f.write(codegen.emit_vector_kernel(spec))
        log_path = os.path.join(out_dir, f"rl_log_{key}.jsonl")
        reporting.write_jsonl(log_path, result.log)
        result.network.save(os.path.join(out_dir, f"policy_{key}.json"))
        baseline = (evaluator.scalar_baseline_analytic(M, N, K)
                    if backend == "analytic" else
                    evaluator.evaluate_native(
                        spec, M, N, K,
                        repetitions=max(5, cfg["evaluator"]["repetitions"] // 10),
                        compiler_cmd=("cc", "-O3", "-o", "{out}", "{src}", "-lm"),
                        scalar_only=True))
        report_rows.append({
            "M": M, "N": N, "K": K, "variant": vid,
            "u_i": result.best_unrolls[0], "u_j": result.best_unrolls[1],
            "u_k": result.best_unrolls[2], "backend": backend,
            "gflops": result.best_perf, "baseline_gflops": baseline.gflops,
            "speedup": result.best_perf / baseline.gflops,
            "correctness_checked": bool(checked),
            "kernel_file": os.path.relpath(kernel_path, out_dir),
            "variant_detail": {"order": by_id[vid]["order"],
                               "tiles": by_id[vid]["tiles"]},
        })
        reporting.rl_trace_figure(
            os.path.join(fig_dir, f"rl_trace_{key}.png"), result.log,
            f"RL unroll search, {key}")

    # Stage 5: report + figures + manifest.
    try:
        reporting.write_report_csv(os.path.join(out_dir, "report.csv"), report_rows)
        reporting.speedup_figure(os.path.join(fig_dir, "speedup.png"), report_rows)
        manifest = reporting.build_manifest(out_dir, exclude=("report.json",))
        reporting.write_json(os.path.join(out_dir, "report.json"), {
            "tool": {"name": "looptune", "version": __version__},
            "config": {k: v for k, v in cfg.items() if k != "output_dir"},
            "config_hash": config_hash(cfg),
            "seed": seed,
            "backend": backend,
            "model_format_version": ranker.MODEL_FORMAT_VERSION,
            "ranker_summary": ranker_summary,
            "results": report_rows,
            "manifest": manifest,
        })
    except Exception as e:
        raise StageError("report", str(e))

    for row in report_rows:
        print(f"  {row['M']}x{row['N']}x{row['K']}: variant {row['variant']} "
              f"unrolls ({row['u_i']},{row['u_j']},{row['u_k']}) "
              f"{row['gflops']:.3f} GFLOPS, speed-up {row['speedup']:.2f}x")
    print(f"report written to {out_dir}/report.json "
          f"({len(report_rows)} problem sizes, backend {backend})")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="looptune",
        description="Autotuning toolkit for matrix-multiplication loop nests",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="working-set report for a loop nest")
    p.add_argument("--gemm", help="problem size M,N,K")
    p.add_argument("--nest", help="loop-nest JSON file")
    p.add_argument("--config", help="pipeline config (for the cache hierarchy)")
    p.add_argument("--out", help="directory for analyze.json/.csv and figure")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("variants", help="enumerate and featurize tiled variants")
    p.add_argument("--gemm", required=True, help="problem size M,N,K")
    p.add_argument("--config", help="pipeline config (search space, cache)")
    p.add_argument("--out", help="output variants JSON path")
    p.set_defaults(func=cmd_variants)

    p = sub.add_parser("train-ranker", help="train the pairwise comparator")
    p.add_argument("--measurements", required=True,
                   help="measurements JSON from the variants stage")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--config", help="pipeline config (ranker hyperparameters)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_ranker)

    p = sub.add_parser("rank", help="tournament-rank variants with a trained model")
    p.add_argument("--variants", required=True, help="variants JSON")
    p.add_argument("--model", required=True, help="trained comparator model")
    p.add_argument("--top-fraction", type=float, default=0.10)
    p.add_argument("--out", help="output ranking JSON path")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("tune", help="RL search over unroll factors")
    p.add_argument("--gemm", required=True, help="problem size M,N,K")
    p.add_argument("--config", help="pipeline config (rl section)")
    p.add_argument("--backend", choices=("analytic", "native"))
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--out", help="directory for the search log and best spec")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("codegen", help="emit kernel source")
    p.add_argument("--gemm", required=True, help="problem size M,N,K")
    p.add_argument("--spec", help="unroll factors u_i,u_j,u_k (default 1,16,1)")
    p.add_argument("--scalar", action="store_true", help="emit the scalar kernel")
    p.add_argument("--out", help="output .c path (default: stdout)")
    p.set_defaults(func=cmd_codegen)

    p = sub.add_parser("bench", help="evaluate one kernel spec")
    p.add_argument("--gemm", required=True, help="problem size M,N,K")
    p.add_argument("--spec", help="unroll factors u_i,u_j,u_k (default 1,16,1)")
    p.add_argument("--backend", choices=("analytic", "native"))
    p.add_argument("--repetitions", type=int)
    p.add_argument("--config", help="pipeline config (evaluator section)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("pipeline", help="run the full tuning pipeline")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--backend", choices=("analytic", "native"))
    p.add_argument("--out", help="override output directory")
    p.add_argument("--top-fraction", type=float)
    p.add_argument("--emit-config", metavar="PATH",
                   help="write the default config to PATH and exit")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (MiscompileError, CodegenBugError) as e:
        print(f"correctness failure: {e}", file=sys.stderr)
        return 4
    except StageError as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

import json
import os

import pytest

from looptune import cli, reporting
from looptune.ranker import ComparatorModel


def run(*argv):
    return cli.main(list(argv))


def tiny_config(tmp_path, **overrides):
    cfg = {
        "problem_sizes": [[48, 48, 48], [34, 32, 34]],
        "search_space": {
            "level1": {"i": [24, 48], "j": [24, 48], "k": [24, 48]},
            "level2": {"i": [24], "j": [24], "k": [24]},
            "orders": [["i", "j", "k"]],
            "nested_only": True,
        },
        "ranker": {"epochs": 40, "max_pairs": 200},
        "rl": {"episodes": 10, "steps_per_episode": 6},
        "top_fraction": 0.25,
        "output_dir": str(tmp_path / "out"),
        "seed": 5,
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(cli.ConfigError):
            cli.validate_config({"no_such_key": 1})

    def test_bad_fraction_rejected(self):
        with pytest.raises(cli.ConfigError):
            cli.validate_config({"top_fraction": 7})

    def test_bad_order_rejected(self):
        with pytest.raises(cli.ConfigError):
            cli.validate_config({"search_space": {"orders": [["i", "i", "k"]]}})

    def test_suite_expansion(self):
        cfg = cli.validate_config({"problem_sizes": "suite"})
        assert len(cfg["problem_sizes"]) == 10
        assert [128, 2048, 4096] in cfg["problem_sizes"]

    def test_default_config_is_valid(self):
        assert cli.validate_config(cli.default_config())

    def test_missing_config_exits_2(self, capsys):
        assert run("pipeline", "--config", "/nonexistent.json") == 2

    def test_invalid_schema_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"seed": "not an int"}')
        assert run("pipeline", "--config", str(bad)) == 2

    def test_config_hash_ignores_output_dir(self):
        a = cli.validate_config({"output_dir": "here"})
        b = cli.validate_config({"output_dir": "there"})
        assert cli.config_hash(a) == cli.config_hash(b)


class TestAnalyze:
    def test_gemm_444_report(self, capsys):
        assert run("analyze", "--gemm", "4,4,4") == 0
        out = capsys.readouterr().out
        assert "ws_min=11" in out
        assert "2K + 3" in out
        assert "N*K + N + 1" in out

    def test_k1_empty_dependence_note(self, capsys):
        assert run("analyze", "--gemm", "4,4,1") == 0
        out = capsys.readouterr().out
        assert "no instances" in out

    def test_writes_artifacts(self, tmp_path, capsys):
        out = str(tmp_path / "a")
        assert run("analyze", "--gemm", "8,8,8", "--out", out) == 0
        assert os.path.exists(os.path.join(out, "analyze.json"))
        assert os.path.exists(os.path.join(out, "analyze.csv"))
        assert os.path.exists(os.path.join(out, "working_sets.png"))
        with open(os.path.join(out, "analyze.csv")) as f:
            header = f.readline()
        assert header.startswith("array,kind,carried_by,ws_min,ws_max")

    def test_bad_size_exits_2(self, capsys):
        assert run("analyze", "--gemm", "nope") == 2

    def test_nest_json_input(self, tmp_path, capsys):
        from looptune.ir import gemm_nest, nest_to_json
        path = tmp_path / "nest.json"
        path.write_text(json.dumps(nest_to_json(gemm_nest(4, 4, 4))))
        assert run("analyze", "--nest", str(path)) == 0
        assert "ws_min=11" in capsys.readouterr().out


class TestStandaloneStages:
    def test_variants_train_rank_chain(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        vpath = str(tmp_path / "variants.json")
        mpath = str(tmp_path / "model.json")
        rpath = str(tmp_path / "ranked.json")
        assert run("variants", "--gemm", "48,48,48", "--config", cfg,
                   "--out", vpath) == 0
        assert run("train-ranker", "--measurements", vpath, "--config", cfg,
                   "--out", mpath) == 0
        out = capsys.readouterr().out
        assert "held-out pairwise accuracy" in out
        model, scaler = ComparatorModel.load(mpath)
        assert scaler is not None
        assert run("rank", "--variants", vpath, "--model", mpath,
                   "--top-fraction", "0.25", "--out", rpath) == 0
        with open(rpath) as f:
            ranked = json.load(f)
        with open(vpath) as f:
            n_variants = len(json.load(f)["variants"])
        assert len(ranked["ranking"]) == n_variants
        assert len(ranked["selected"]) == -(-n_variants // 4)

    def test_train_ranker_refuses_single_variant(self, tmp_path):
        meas = tmp_path / "one.json"
        meas.write_text(json.dumps({"sizes": {"8x8x8": [
            {"id": "v0", "features": [1.0, 2.0], "perf": 1.0}]}}))
        assert run("train-ranker", "--measurements", str(meas),
                   "--out", str(tmp_path / "m.json")) == 2

    def test_tune_writes_log(self, tmp_path, capsys):
        out = str(tmp_path / "t")
        assert run("tune", "--gemm", "34,32,34", "--episodes", "8",
                   "--out", out) == 0
        assert os.path.exists(os.path.join(out, "rl_log.jsonl"))
        assert os.path.exists(os.path.join(out, "best_spec.json"))
        assert os.path.exists(os.path.join(out, "rl_trace.png"))

    def test_codegen_stdout_and_file(self, tmp_path, capsys):
        assert run("codegen", "--gemm", "64,64,64", "--spec", "2,32,2") == 0
        out = capsys.readouterr().out
        assert "_mm512_fmadd_ps" in out
        path = str(tmp_path / "k.c")
        assert run("codegen", "--gemm", "64,64,64", "--scalar", "--out", path) == 0
        assert os.path.exists(path)

    def test_codegen_over_budget_exits_3(self, capsys):
        assert run("codegen", "--gemm", "64,64,64", "--spec", "8,64,2") == 3

    def test_bench_analytic(self, capsys):
        assert run("bench", "--gemm", "64,64,64", "--spec", "2,32,2") == 0
        out = capsys.readouterr().out
        assert "GFLOPS" in out and "speed-up" in out

    def test_correctness_failure_exits_4(self, monkeypatch, capsys):
        from looptune import evaluator as ev

        def boom(*a, **k):
            raise ev.MiscompileError("kernel output mismatch")

        monkeypatch.setattr(ev, "evaluate_native", boom)
        monkeypatch.setattr(ev, "toolchain_available", lambda *a: True)
        assert run("bench", "--gemm", "16,16,16", "--backend", "native") == 4

    def test_tune_persists_policy_weights(self, tmp_path):
        out = str(tmp_path / "tw")
        assert run("tune", "--gemm", "34,32,34", "--episodes", "5",
                   "--out", out) == 0
        from looptune.rl import QNetwork
        net = QNetwork.load(os.path.join(out, "policy_weights.json"))
        assert net.n_actions == 7


class TestPipeline:
    def test_emit_config(self, tmp_path):
        path = str(tmp_path / "default.json")
        assert run("pipeline", "--emit-config", path) == 0
        with open(path) as f:
            assert cli.validate_config(json.load(f))

    def test_end_to_end_artifacts(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        assert run("pipeline", "--config", cfg) == 0
        out = str(tmp_path / "out")
        with open(os.path.join(out, "report.json")) as f:
            report = json.load(f)
        assert len(report["results"]) == 2
        # Every reported kernel passed correctness verification.
        assert all(r["correctness_checked"] for r in report["results"])
        # Manifest covers every artifact (no orphans), and hashes match.
        on_disk = set()
        for root, _, files in os.walk(out):
            for name in files:
                rel = os.path.relpath(os.path.join(root, name), out)
                on_disk.add(rel.replace(os.sep, "/"))
        listed = {e["path"] for e in report["manifest"]}
        assert listed == on_disk - {"report.json"}
        for entry in report["manifest"]:
            assert reporting.sha256_file(os.path.join(out, entry["path"])) == \
                entry["sha256"]
        assert os.path.exists(os.path.join(out, "report.csv"))
        assert os.path.exists(os.path.join(out, "figures", "speedup.png"))

    def test_determinism_same_seed(self, tmp_path):
        cfg = tiny_config(tmp_path)
        assert run("pipeline", "--config", cfg, "--out", str(tmp_path / "r1")) == 0
        assert run("pipeline", "--config", cfg, "--out", str(tmp_path / "r2")) == 0
        for root, _, files in os.walk(tmp_path / "r1"):
            for name in files:
                p1 = os.path.join(root, name)
                p2 = p1.replace(str(tmp_path / "r1"), str(tmp_path / "r2"))
                with open(p1, "rb") as f1, open(p2, "rb") as f2:
                    assert f1.read() == f2.read(), f"{name} differs between runs"

    def test_seed_changes_report(self, tmp_path):
        cfg = tiny_config(tmp_path)
        run("pipeline", "--config", cfg, "--out", str(tmp_path / "s1"), "--seed", "1")
        run("pipeline", "--config", cfg, "--out", str(tmp_path / "s2"), "--seed", "2")
        with open(tmp_path / "s1" / "report.json") as f1, \
                open(tmp_path / "s2" / "report.json") as f2:
            assert json.load(f1)["results"] != json.load(f2)["results"]

    def test_single_variant_full_fraction(self, tmp_path, capsys):
        cfg = tiny_config(
            tmp_path,
            problem_sizes=[[48, 48, 48], [32, 32, 32]],
            search_space={
                "level1": {"i": [48], "j": [48], "k": [48]},
                "level2": {"i": [24], "j": [24], "k": [24]},
                "orders": [["i", "j", "k"]],
                "nested_only": True,
            },
            top_fraction=1.0,
        )
        assert run("pipeline", "--config", cfg) == 0
        with open(tmp_path / "out" / "report.json") as f:
            report = json.load(f)
        assert all(r["u_j"] >= 16 for r in report["results"])

    def test_scalar_fallback_for_narrow_n(self, tmp_path):
        cfg = tiny_config(tmp_path, problem_sizes=[[32, 1, 32], [32, 32, 32]])
        assert run("pipeline", "--config", cfg) == 0
        with open(tmp_path / "out" / "report.json") as f:
            report = json.load(f)
        narrow = next(r for r in report["results"] if r["N"] == 1)
        assert (narrow["u_i"], narrow["u_j"], narrow["u_k"]) == (1, 1, 1)
        assert narrow["correctness_checked"]

import csv
import json

import pytest

from dackgr.cli import main

SMALL_AGENT = ["--epochs", "2", "--batch-size", "16", "--rollouts", "2", "--beam-width", "4", "--dim", "8",
               "--hidden", "8", "--layers", "1", "--mlp-hidden", "8"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, kge = root / "data", root / "kge"
    assert main(["make-synthetic", "--out", str(data), "--heads", "12", "--mids", "12", "--groups", "3",
                 "--noise", "6", "--sparsify", "0.5", "--seed", "1"]) == 0
    assert main(["train-kge", "--data", str(data), "--out", str(kge), "--kind", "distmult", "--dim", "8",
                 "--epochs", "3"]) == 0
    return root, data, kge


def _agent(workspace, name, *extra):
    root, data, kge = workspace
    out = root / name
    if not (out / "metrics.json").exists():
        assert main(["train-agent", "--data", str(data), "--kge", str(kge), "--out", str(out), *SMALL_AGENT, *extra]) == 0
    return out


class TestPipeline:
    def test_kge_run_dir(self, workspace):
        _, _, kge = workspace
        for name in ("config.json", "seed", "kge_epochs.jsonl", "metrics.json", "kge/manifest.json"):
            assert (kge / name).exists(), name
        assert json.loads((kge / "config.json").read_text())["kge"]["kind"] == "distmult"

    def test_agent_run_dir(self, workspace):
        run = _agent(workspace, "full", "--completion-alpha", "0.33")
        for name in ("config.json", "seed", "epochs.jsonl", "metrics.json", "policy/manifest.json"):
            assert (run / name).exists(), name
        lines = (run / "epochs.jsonl").read_text().splitlines()
        assert len(lines) == 2
        assert 0 <= json.loads(lines[0])["dc_ratio"] <= 1
        snap = json.loads((run / "config.json").read_text())
        assert snap["train"]["completion"]["alpha"] == 0.33
        assert snap["train"]["policy"]["dim"] == 8

    def test_evaluate_reemits_metrics(self, workspace, capsys):
        run = _agent(workspace, "full", "--completion-alpha", "0.33")
        stored = json.loads((run / "metrics.json").read_text())["test"]
        capsys.readouterr()
        assert main(["evaluate", "--run", str(run), "--split", "test", "--paths", "2"]) == 0
        printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert printed == stored
        assert json.loads((run / "eval_test_metrics.json").read_text())["mrr"] == stored["mrr"]
        assert (run / "eval_test_ranks.csv").read_text().startswith("head,relation,tail,rank")
        assert "Query:" in (run / "eval_test_paths.txt").read_text()

    def test_ablation_cell(self, workspace):
        run = _agent(workspace, "plain", "--anticipation", "off", "--completion-alpha", "0")
        reports = [json.loads(x) for x in (run / "epochs.jsonl").read_text().splitlines()]
        assert all(r["dc_ratio"] == 0 and r["completion_choices"] == 0 for r in reports)
        snap = json.loads((run / "config.json").read_text())["train"]
        assert snap["anticipation"]["strategy"] == "off"

    def test_config_file_and_flag_override(self, workspace, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochs": 1, "lr": 0.01, "completion": {"alpha": 0.5}}))
        root, data, kge = workspace
        out = root / "fromfile"
        assert main(["train-agent", "--data", str(data), "--kge", str(kge), "--out", str(out), "--config", str(cfg),
                     *SMALL_AGENT]) == 0
        snap = json.loads((out / "config.json").read_text())["train"]
        assert snap["lr"] == 0.01  # from file
        assert snap["epochs"] == 2  # flag wins
        assert snap["completion"]["alpha"] == 0.5

    def test_analyze(self, workspace, capsys):
        root, _, _ = workspace
        lo = _agent(workspace, "a02", "--completion-alpha", "0.2")
        hi = _agent(workspace, "a05", "--completion-alpha", "0.5")
        assert main(["analyze", "--runs", str(lo), str(hi), "--out", str(root / "analysis")]) == 0
        rows = list(csv.DictReader(open(root / "analysis" / "dc_ratio_by_alpha.csv")))
        assert [float(r["alpha"]) for r in rows] == [0.2, 0.5]
        by_epoch = list(csv.DictReader(open(root / "analysis" / "dc_ratio_by_epoch.csv")))
        assert len(by_epoch) == 4

    def test_grid(self, workspace):
        root, data, kge = workspace
        out = root / "grid"
        assert main(["train-agent", "--data", str(data), "--kge", str(kge), "--out", str(out), *SMALL_AGENT,
                     "--epochs", "1", "--grid", "--grid-alpha", "0.2", "0.5", "--grid-max", "10", "--grid-k", "2"]) == 0
        rows = list(csv.DictReader(open(out / "grid.csv")))
        assert len(rows) == 2
        best = json.loads((out / "grid_best.json").read_text())
        assert best["run"] in {r["run"] for r in rows}

    def test_inspect_graph(self, workspace, capsys):
        _, data, _ = workspace
        assert main(["inspect-graph", "--data", str(data), "--entity", "a0"]) == 0
        out = capsys.readouterr().out
        assert '"mean_out_degree"' in out and "(LOOP, a0)" in out


class TestSampleDataset:
    def test_retain(self, tmp_path):
        src = tmp_path / "all.txt"
        src.write_text("".join(f"e{i}\tr{i % 3}\te{(i * 7 + 1) % 40}\n" for i in range(200)))
        out = tmp_path / "ds"
        assert main(["sample-dataset", "--input", str(src), "--out", str(out), "--fraction", "0.5"]) == 0
        n = sum(len((out / f"{s}.txt").read_text().splitlines()) for s in ("train", "valid", "test"))
        assert n == 100
        assert (out / "sparsity.json").exists()

    def test_entities(self, tmp_path):
        src = tmp_path / "all.txt"
        src.write_text("".join(f"e{i}\tr\te{i + 1}\n" for i in range(30)))
        seeds = tmp_path / "seeds.txt"
        seeds.write_text("e0\n")
        out = tmp_path / "ds"
        assert main(["sample-dataset", "--input", str(src), "--out", str(out), "--mode", "entities",
                     "--seed-entities", str(seeds), "--rounds", "3", "--ratios", "1", "0", "0"]) == 0
        assert len((out / "train.txt").read_text().splitlines()) == 4


class TestErrors:
    def test_missing_data(self, tmp_path, capsys):
        assert main(["inspect-graph", "--data", str(tmp_path / "nope")]) != 0
        assert "error" in capsys.readouterr().err

    def test_bad_config(self, workspace, tmp_path, capsys):
        root, data, kge = workspace
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["train-agent", "--data", str(data), "--kge", str(kge), "--out", str(tmp_path / "o"),
                     "--config", str(bad)]) != 0
        unknown = tmp_path / "unknown.json"
        unknown.write_text(json.dumps({"no_such_key": 1}))
        assert main(["train-agent", "--data", str(data), "--kge", str(kge), "--out", str(tmp_path / "o"),
                     "--config", str(unknown)]) != 0

    def test_not_a_run(self, tmp_path):
        assert main(["evaluate", "--run", str(tmp_path)]) != 0

    def test_missing_kge(self, workspace, tmp_path):
        _, data, _ = workspace
        assert main(["train-agent", "--data", str(data), "--kge", str(tmp_path), "--out", str(tmp_path / "o")]) != 0

    def test_malformed_triples(self, tmp_path, capsys):
        (tmp_path / "train.txt").write_text("a\tb\n")
        assert main(["inspect-graph", "--data", str(tmp_path)]) != 0
        assert ":1" in capsys.readouterr().err

    def test_analyze_missing_logs(self, tmp_path):
        assert main(["analyze", "--runs", str(tmp_path), "--out", str(tmp_path / "a")]) != 0

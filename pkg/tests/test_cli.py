import json

import pytest

from plannerrl.cli import main
from plannerrl.metrics import read_metrics_csv
from plannerrl.trainer import TrainConfig
from plannerrl.world import load_world

SMALL = ["--entities", "20", "--relations", "3", "--hops", "1-2"]


@pytest.fixture
def world_file(tmp_path):
    path = tmp_path / "world.json"
    assert main(["gen-world", "--seed", "1", *SMALL, "--out", str(path)]) == 0
    return path


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    cfg = TrainConfig(batch_queries=4, rollouts_per_query=4, steps=3, n_train_queries=16, n_heldout_queries=8)
    path.write_text(cfg.dumps())
    return path


def test_gen_world(tmp_path, world_file):
    w = load_world(world_file)
    assert len(w.entities) == 20 and w.hop_depth_range == (1, 2)
    again = tmp_path / "again.json"
    main(["gen-world", "--seed", "1", *SMALL, "--out", str(again)])
    assert again.read_bytes() == world_file.read_bytes()


def test_gen_world_rejects_bad_size(tmp_path, capsys):
    code = main(["gen-world", "--entities", "1", "--relations", "2", "--out", str(tmp_path / "w.json")])
    assert code != 0
    assert "n_entities" in capsys.readouterr().err


def test_train_requires_world(tmp_path, capsys):
    assert main(["train", "--out-dir", str(tmp_path / "run")]) == 1
    assert "--world" in capsys.readouterr().err


def test_unknown_command_is_usage_error():
    assert main(["frobnicate"]) == 1
    assert main([]) == 1


def test_train_writes_run(tmp_path, world_file, config_file):
    out = tmp_path / "run"
    assert main(["train", "--world", str(world_file), "--config", str(config_file), "--out-dir", str(out)]) == 0
    assert len(read_metrics_csv(out / "metrics.csv")) == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "finished"
    assert manifest["world_hash"] == load_world(world_file).digest()


def test_mode_flag_beats_config(tmp_path, world_file, config_file):
    out = tmp_path / "run"
    main(["train", "--world", str(world_file), "--config", str(config_file), "--out-dir", str(out), "--mode", "vanilla", "--steps", "1"])
    saved = TrainConfig.load(out / "config.json")
    assert not saved.shaping.enable_eas and not saved.shaping.enable_sau
    assert saved.steps == 1


def test_env_var_output_root(tmp_path, world_file, config_file, monkeypatch):
    monkeypatch.setenv("PLANNERRL_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["train", "--world", str(world_file), "--config", str(config_file), "--steps", "1"]) == 0
    assert (tmp_path / "root" / "run" / "metrics.csv").exists()


def test_bad_config_is_usage_error(tmp_path, world_file):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"version": 1, "mystery": 3}')
    assert main(["train", "--world", str(world_file), "--config", str(cfg), "--out-dir", str(tmp_path / "r")]) == 1


def test_numerical_abort_exit_code(tmp_path, world_file, config_file):
    code = main(["train", "--world", str(world_file), "--config", str(config_file),
                 "--out-dir", str(tmp_path / "r"), "--learning-rate", "inf"])
    assert code == 3


def test_analyze_matches_training_metrics(tmp_path, world_file, config_file):
    out = tmp_path / "run"
    main(["train", "--world", str(world_file), "--config", str(config_file), "--out-dir", str(out)])
    csv_out = tmp_path / "analyzed.csv"
    assert main(["analyze", str(out), "--format", "metrics", "--out", str(csv_out)]) == 0
    assert csv_out.read_bytes() == (out / "metrics.csv").read_bytes()
    tables = tmp_path / "tables.txt"
    assert main(["analyze", str(out), "--out", str(tables)]) == 0
    text = tables.read_text()
    assert "# stage entropy" in text and "# reward tiers" in text and "# tool calls" in text


def test_analyze_empty_and_corrupted(tmp_path, capsys):
    logs = tmp_path / "logs"
    logs.mkdir()
    assert main(["analyze", str(logs)]) == 0
    (logs / "step_0001.jsonl").write_text('{"query_id": "q"}\n{broken\n')
    assert main(["analyze", str(logs)]) == 2
    assert "line 1" in capsys.readouterr().err


def test_eval_and_replay(tmp_path, world_file, config_file, capsys):
    out = tmp_path / "run"
    main(["train", "--world", str(world_file), "--config", str(config_file), "--out-dir", str(out)])
    capsys.readouterr()
    code = main(["eval", "--checkpoint", str(out / "checkpoints" / "final.npz"), "--world", str(world_file),
                 "--queries", str(out / "heldout_queries.jsonl"), "--greedy"])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["n_queries"] == 8 and 0.0 <= report["accuracy"] <= 1.0
    assert main(["replay", "--manifest", str(out / "manifest.json"), "--out-dir", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()


def test_eval_errors(tmp_path, world_file):
    empty = tmp_path / "q.jsonl"
    empty.write_text("")
    assert main(["eval", "--checkpoint", str(tmp_path / "none.npz"), "--world", str(world_file), "--queries", str(empty)]) == 2
    assert main(["eval", "--world", str(world_file), "--queries", str(empty)]) == 1

import json
import shutil

import pytest

from conftest import read_jsonl
from ledgerloop.cli import main


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["sample-personas", "--n", "4", "--seed", "2", "--out", str(root / "p.jsonl")]) == 0
    assert main(["generate", "--personas", str(root / "p.jsonl"), "--out", str(root / "runs"), "--days", "70",
                 "--seed", "1"]) == 0
    (run,) = (root / "runs").iterdir()
    return run


def test_generate_writes_run(cli_run):
    m = json.loads((cli_run / "manifest.json").read_text())
    assert m["n_users"] == 4 and m["seed"] == 1
    assert {p.name for p in cli_run.iterdir()} >= {"manifest.json", "events.jsonl", "audit.jsonl", "snapshots.jsonl",
                                                   "personas.jsonl"}


def test_replay_and_verify_ok(cli_run, capsys):
    assert main(["replay", "--run", str(cli_run)]) == 0
    assert main(["verify", "--run", str(cli_run)]) == 0
    assert "OK" in capsys.readouterr().out


def test_verify_flags_tampering(cli_run, tmp_path, capsys):
    run = tmp_path / "run"
    shutil.copytree(cli_run, run)
    lines = (run / "events.jsonl").read_text().splitlines(keepends=True)
    (run / "events.jsonl").write_text("".join(lines[1:]))
    assert main(["verify", "--run", str(run)]) == 1
    assert "missing from the export" in capsys.readouterr().out


def test_replay_flags_wrong_final_hash(cli_run, tmp_path):
    run = tmp_path / "run"
    shutil.copytree(cli_run, run)
    rows = read_jsonl(run / "snapshots.jsonl")
    next(r for r in rows if r["kind"] == "final")["state_hash"] = "f" * 16
    (run / "snapshots.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    assert main(["replay", "--run", str(run)]) == 1


def test_build_task_encode_and_stats(cli_run, tmp_path, capsys):
    task = tmp_path / "ill.jsonl"
    assert main(["build-task", "illiquidity", "--run", str(cli_run), "--n-months", "1", "--horizon-days", "30",
                 "--out", str(task)]) == 0
    assert main(["build-task", "theft", "--run", str(cli_run), "--n-months", "1", "--count", "5",
                 "--out", str(tmp_path / "theft.jsonl")]) == 0
    assert len(read_jsonl(tmp_path / "theft.jsonl")) == 5
    assert main(["encode", "--task", str(task), "--vocab-threshold", "1", "--train-ratio", "0.5",
                 "--out", str(tmp_path / "enc")]) == 0
    assert (tmp_path / "enc" / "header.json").exists()
    assert main(["stats", "--run", str(cli_run), "--out", str(tmp_path / "stats")]) == 0
    assert (tmp_path / "stats" / "summary.txt").exists()
    assert "events:" in capsys.readouterr().out


def test_derive_profiles_and_bundled(tmp_path):
    src = tmp_path / "bundled.jsonl"
    assert main(["sample-personas", "--bundled", "--out", str(src)]) == 0
    assert len(read_jsonl(src)) == 10
    assert main(["derive-profiles", "--personas", str(src), "--out", str(tmp_path / "aug.jsonl")]) == 0
    assert len(read_jsonl(tmp_path / "aug.jsonl")) == 10


@pytest.mark.parametrize("argv", [
    [],
    ["generate"],
    ["frobnicate"],
    ["generate", "--personas", "/nonexistent.jsonl", "--out", "/tmp/x"],
    ["generate", "--personas", "/nonexistent.jsonl", "--out", "/tmp/x", "--preset", "broke"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2


def test_bad_config_exits_2(tmp_path, cli_run):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"random_event_prob": 3}))
    personas = cli_run / "personas.jsonl"
    assert main(["generate", "--personas", str(personas), "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_too_few_users_for_split_exits_2(tmp_path, cli_run):
    task = tmp_path / "t.jsonl"
    main(["build-task", "illiquidity", "--run", str(cli_run), "--n-months", "1", "--out", str(task)])
    assert main(["encode", "--task", str(task), "--train-ratio", "0.99", "--out", str(tmp_path / "e")]) == 2

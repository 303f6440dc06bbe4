import json
from pathlib import Path

import pytest

from macl.cli import run


def _synth(tmp_path, n=16, seed=3, rate=0.9) -> Path:
    data = tmp_path / "data"
    code = run(
        [
            "synth",
            "--seed", str(seed),
            "--n", str(n),
            "--n-valid", "6",
            "--n-test", "6",
            "--vocab-size", "60",
            "--shortcut-rate", str(rate),
            "--out", str(data),
        ]
    )
    assert code == 0
    return data


def _train_config(tmp_path) -> Path:
    path = tmp_path / "desk.toml"
    path.write_text(
        "[train]\n"
        "learning_rate = 1e-3\n"
        "batch_size = 8\n"
        "max_epochs = 1\n"
        "beam_size = 4\n"
        "num_groups = 2\n"
        "num_negatives = 2\n"
        "[model]\n"
        "max_target_len = 12\n"
    )
    return path


def test_unknown_flag_exits_one(capsys):
    assert run(["synth", "--does-not-exist"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_exits_one():
    assert run(["frobnicate"]) == 1


def test_missing_input_file_exits_one(tmp_path, capsys):
    code = run(["score", "--references", str(tmp_path / "no.jsonl"),
                "--generations", str(tmp_path / "no2.jsonl"), "--out", str(tmp_path / "r.json")])
    assert code == 2 or code == 1  # nonexistent file is a runtime OSError -> 2


def test_synth_reruns_byte_identical(tmp_path):
    d1 = _synth(tmp_path / "a")
    d2 = _synth(tmp_path / "b")
    for name in ("train.jsonl", "valid.jsonl", "test.jsonl"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()


def test_synth_rejects_bad_rate(tmp_path, capsys):
    code = run(["synth", "--shortcut-rate", "2.0", "--n", "4", "--out", str(tmp_path / "x")])
    assert code == 1
    assert "shortcut_rate" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train(mle) -> decode -> score, shared by the later tests."""
    tmp_path = tmp_path_factory.mktemp("pipe")
    data = _synth(tmp_path)
    cfg = _train_config(tmp_path)
    out = tmp_path / "run-mle"
    assert run(["train", "--data", str(data), "--objective", "mle",
                "--config", str(cfg), "--out", str(out), "--seed", "4"]) == 0
    gen = tmp_path / "gen.jsonl"
    assert run(["decode", "--checkpoint", str(out / "model.ckpt"), "--data", str(data / "test.jsonl"),
                "--strategy", "greedy", "--out", str(gen)]) == 0
    report = tmp_path / "mle.json"
    csv = tmp_path / "per_example.csv"
    assert run(["score", "--references", str(data / "test.jsonl"), "--generations", str(gen),
                "--out", str(report), "--csv", str(csv)]) == 0
    return tmp_path, data, out, gen, report, csv


def test_train_writes_run_artifacts(pipeline):
    _, _, out, _, _, _ = pipeline
    run_data = json.loads((out / "run.json").read_text())
    assert run_data["objective"] == "mle"
    assert (out / "model.ckpt").exists()
    assert (out / "trace.jsonl").exists()


def test_score_report_schema(pipeline):
    _, _, _, _, report, csv = pipeline
    data = json.loads(report.read_text())
    for side in ("generated", "reference"):
        for key in ("dup_16", "dup_32", "plcs_mean", "mkp_1", "mkp_2", "pod"):
            assert key in data[side]
    assert "kud" in data
    assert "reference_kp1" in data["histograms"]
    masses = data["histograms"]["generated_kp1"]["masses"]
    assert len(masses) == 10
    assert sum(masses) == pytest.approx(1.0)
    header, *rows = csv.read_text().splitlines()
    assert header == "example_id,plcs_reference,kp1_reference,plcs_generated,kp1_generated"
    assert len(rows) == data["n_examples"]


def test_decode_nucleus_deterministic(pipeline, tmp_path):
    _, data, out, _, _, _ = pipeline
    a = tmp_path / "a.jsonl"
    b = tmp_path / "b.jsonl"
    for dest in (a, b):
        assert run(["decode", "--checkpoint", str(out / "model.ckpt"),
                    "--data", str(data / "test.jsonl"), "--strategy", "nucleus",
                    "--seed", "9", "--out", str(dest)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_report_comparison_and_plots(pipeline, capsys):
    tmp_path, _, _, _, report, _ = pipeline
    out = tmp_path / "cmp"
    assert run(["report", "--runs", str(report), str(report), "--labels", "mle", "again",
                "--out", str(out), "--plots"]) == 0
    table = capsys.readouterr().out
    assert "PoD" in table and "KUD" in table and "mle" in table
    csv = (out / "comparison.csv").read_text()
    assert csv.splitlines()[0] == "metric,mle,again,reference"
    assert (out / "histograms_mle.csv").exists()
    assert (out / "kp_histogram_mle.png").exists()
    assert (out / "comparison.png").exists()


def test_report_rejects_label_mismatch(pipeline):
    tmp_path, _, _, _, report, _ = pipeline
    assert run(["report", "--runs", str(report), "--labels", "a", "b",
                "--out", str(tmp_path / "bad")]) == 1


def test_inputs_never_mutated(pipeline):
    tmp_path, data, out, gen, report, _ = pipeline
    before = (data / "test.jsonl").read_bytes()
    assert run(["decode", "--checkpoint", str(out / "model.ckpt"), "--data", str(data / "test.jsonl"),
                "--strategy", "greedy", "--out", str(tmp_path / "again.jsonl")]) == 0
    assert (data / "test.jsonl").read_bytes() == before


def test_config_file_unknown_key_rejected(tmp_path, capsys):
    data = _synth(tmp_path)
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nlearning_rat = 0.1\n")
    code = run(["train", "--data", str(data), "--objective", "mle",
                "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "learning_rat" in capsys.readouterr().err


def test_config_json_equivalent(tmp_path):
    data = _synth(tmp_path)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"max_epochs": 1, "learning_rate": 1e-3,
                                         "batch_size": 8, "beam_size": 4,
                                         "num_groups": 2, "num_negatives": 2}}))
    assert run(["train", "--data", str(data), "--objective", "mle",
                "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0


def test_mine_subcommand(pipeline, tmp_path):
    _, data, out, _, _, _ = pipeline
    pools = tmp_path / "pools.jsonl"
    assert run(["mine", "--degenerator", str(out / "model.ckpt"), "--data", str(data / "valid.jsonl"),
                "--out", str(pools), "--m", "2", "--beam-size", "4", "--num-groups", "2"]) == 0
    lines = [json.loads(l) for l in pools.read_text().splitlines()]
    assert len(lines) == 6
    for rec in lines:
        assert {"id", "negatives", "degenerator_hash"} <= set(rec)
        assert len(rec["negatives"]) <= 2

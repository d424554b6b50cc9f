"""End-to-end command-line behavior: exit codes, determinism, output layout."""

import json

import pytest

from peftlab import cli
from peftlab.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main


def _experiment(tmp_path, **overrides):
    cfg = {
        "task": "sepsis",
        "seeds": [1],
        "shots_k": 0,
        "output_dir": str(tmp_path / "out"),
        "cohort": {"train_n": 12, "test_n": 6, "note_n": 8, "format_n": 8},
        "model": {"d_model": 16, "n_heads": 2, "n_enc_layers": 1,
                  "n_dec_layers": 1, "d_ff": 32, "max_seq_len": 128},
        "train": {"epochs": 1, "batch_size": 4, "learning_rate": 1e-3},
        "base": {"note_epochs": 1, "format_epochs": 1},
        "adapter": {"method": "ia3"},
    }
    cfg.update(overrides)
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(cfg))
    return path, cfg


def test_gen_data_writes_cohort_and_vocab(tmp_path, capsys):
    out = tmp_path / "data"
    rc = main(["gen-data", "--task", "sepsis", "--n", "10", "--seed", "3",
               "--out", str(out)])
    assert rc == EXIT_OK
    assert (out / "sepsis_10_3.jsonl").is_file()
    assert (out / "sepsis_10_3_vocab.json").is_file()
    assert "10 records" in capsys.readouterr().out


def test_gen_data_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--task", "mortality", "--n", "8", "--out", str(a)]) == EXIT_OK
    assert main(["gen-data", "--task", "mortality", "--n", "8", "--out", str(b)]) == EXIT_OK
    assert (a / "mortality_8_0.jsonl").read_bytes() == (b / "mortality_8_0.jsonl").read_bytes()


def test_gen_data_rejects_bad_n(tmp_path, capsys):
    rc = main(["gen-data", "--task", "sepsis", "--n", "0", "--out", str(tmp_path)])
    assert rc == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_missing_config_is_usage_error(tmp_path, capsys):
    rc = main(["train", "--config", str(tmp_path / "nope.json")])
    assert rc == EXIT_USAGE


def test_invalid_json_config_is_usage_error(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert main(["train", "--config", str(p)]) == EXIT_USAGE


def test_bad_adapter_method_is_usage_error(tmp_path):
    path, _ = _experiment(tmp_path, adapter={"method": "bitfit"})
    assert main(["train", "--config", str(path)]) == EXIT_USAGE


def test_duplicate_seeds_rejected(tmp_path):
    path, _ = _experiment(tmp_path, seeds=[1, 1])
    assert main(["train", "--config", str(path)]) == EXIT_USAGE


def test_eval_without_run_is_runtime_error(tmp_path, capsys):
    rc = main(["eval", "--run-dir", str(tmp_path)])
    assert rc == EXIT_RUNTIME


def test_report_without_metrics_is_runtime_error(tmp_path):
    assert main(["report", "--runs", str(tmp_path)]) == EXIT_RUNTIME


def test_full_pipeline_train_eval_report(tmp_path, capsys):
    path, cfg = _experiment(tmp_path)
    assert main(["train", "--config", str(path)]) == EXIT_OK
    run_dir = tmp_path / "out" / "ia3" / "ia3" / "1"
    assert (run_dir / "adapters.json").is_file()
    assert (run_dir / "train_report.json").is_file()
    assert (run_dir / "run.json").is_file()
    assert (tmp_path / "out" / "base" / "1" / "model.json").is_file()
    capsys.readouterr()

    assert main(["eval", "--run-dir", str(run_dir)]) == EXIT_OK
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert metrics["method"] == "ia3"
    assert metrics["task"] == "sepsis"
    assert 0.0 <= metrics["score_pct"] <= 100.0
    capsys.readouterr()

    assert main(["report", "--runs", str(tmp_path / "out")]) == EXIT_OK
    md = capsys.readouterr().out
    assert md.startswith("| Method |")
    assert "ia3" in md

    assert main(["report", "--runs", str(tmp_path / "out"), "--format", "csv"]) == EXIT_OK
    csv_out = capsys.readouterr().out
    assert csv_out.splitlines()[0].startswith("Method,")


def test_train_reuses_cached_base(tmp_path, capsys):
    path, _ = _experiment(tmp_path)
    assert main(["train", "--config", str(path)]) == EXIT_OK
    base = tmp_path / "out" / "base" / "1" / "model.json"
    stamp = base.stat().st_mtime_ns
    assert main(["train", "--config", str(path)]) == EXIT_OK  # idempotent rerun
    assert base.stat().st_mtime_ns == stamp


def test_output_root_env_override(tmp_path, monkeypatch, capsys):
    path, _ = _experiment(tmp_path)
    override = tmp_path / "elsewhere"
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(override))
    assert main(["train", "--config", str(path)]) == EXIT_OK
    assert (override / "ia3" / "ia3" / "1" / "adapters.json").is_file()
    assert not (tmp_path / "out").exists()


def test_gradcheck_command_reports_all_ops(capsys):
    assert main(["gradcheck", "--seed", "0"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "all gradients within tolerance" in out
    for name in ("matmul", "softmax", "cross_entropy", "attention",
                 "adapter A", "adapter gamma"):
        assert name in out

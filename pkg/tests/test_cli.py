import csv
import hashlib
import json
import shutil

import pytest
from typer.testing import CliRunner

from marginkd.cli import MetricsRow, app, write_metrics
from marginkd.errors import ContractError

runner = CliRunner()

SMALL_DATA = ["--c", "3", "--views-per-class", "2", "--per-view", "5", "--d-in", "4", "--seed", "0"]
SMALL_NET = ["--epochs", "2", "--batch-size", "16", "--hidden-dims", "8", "--embed-dim", "6"]


def _invoke(*args):
    return runner.invoke(app, [str(a) for a in args])


@pytest.fixture
def data_csv(tmp_path):
    out = tmp_path / "data"
    result = _invoke("gen-data", *SMALL_DATA, "--out", out)
    assert result.exit_code == 0, result.output
    return out / "data.csv"


@pytest.fixture
def teacher_ckpt(tmp_path, data_csv):
    out = tmp_path / "teacher"
    result = _invoke("train-teacher", "--data", data_csv, *SMALL_NET, "--lambda", "0.5", "--capacity-m", "3",
                     "--out", out)
    assert result.exit_code == 0, result.output
    return out / "teacher.ckpt"


def test_gen_data_writes_rows_and_is_reproducible(tmp_path, data_csv):
    lines = data_csv.read_text().splitlines()
    assert len(lines) == 1 + 3 * 2 * 5
    assert lines[0] == "y,view_id,x0,x1,x2,x3"
    again = tmp_path / "again"
    assert _invoke("gen-data", *SMALL_DATA, "--out", again).exit_code == 0
    assert (again / "data.csv").read_bytes() == data_csv.read_bytes()
    manifest = json.loads((data_csv.parent / "manifest.json").read_text())
    assert manifest["samples"] == 30
    config = json.loads((data_csv.parent / "config.json").read_text())
    assert config["command"] == "gen-data" and config["config"]["generator"]["c"] == 3


def test_gen_data_reads_config_file(tmp_path):
    cfg = tmp_path / "gen.env"
    cfg.write_text("c=2\nviews_per_class=1\nper_view=4\nd_in=3\n")
    out = tmp_path / "out"
    assert _invoke("gen-data", "--config", cfg, "--per-view", "6", "--out", out).exit_code == 0
    assert len((out / "data.csv").read_text().splitlines()) == 1 + 2 * 6


def test_malformed_arguments_exit_two(tmp_path):
    assert _invoke("gen-data", "--c", "abc", "--out", tmp_path).exit_code == 2
    assert _invoke("gen-data", "--class-sep", "1", "--view-sep", "2", "--out", tmp_path).exit_code == 2
    assert _invoke("verify", "--lambdas", "one,two", "--out", tmp_path).exit_code == 2


def test_missing_config_file_exits_three(tmp_path):
    assert _invoke("gen-data", "--config", tmp_path / "nope.env", "--out", tmp_path).exit_code == 3


def test_train_teacher_outputs(teacher_ckpt):
    out = teacher_ckpt.parent
    assert teacher_ckpt.exists()
    with open(out / "train_log.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["epoch"] for r in rows] == ["0", "1"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["role"] == "teacher"
    assert manifest["config"]["lambda"] == 0.5
    assert set(manifest["cache_stats"]) == {"0", "1", "2"}
    lines = (out / "cache_stats.jsonl").read_text().splitlines()
    assert len(lines) == 2
    assert set(json.loads(lines[-1])) == {"0", "1", "2"}


def test_train_teacher_records_dataset_seed_and_hash(tmp_path):
    data_dir = tmp_path / "data"
    assert _invoke("gen-data", *SMALL_DATA[:-1], "7", "--out", data_dir).exit_code == 0
    data = data_dir / "data.csv"
    out = tmp_path / "teacher"
    result = _invoke("train-teacher", "--data", data, *SMALL_NET, "--lambda", "0", "--out", out)
    assert result.exit_code == 0, result.output
    dataset = json.loads((out / "manifest.json").read_text())["dataset"]
    assert dataset["seed"] == 7
    assert dataset["sha256"] == hashlib.sha256(data.read_bytes()).hexdigest()

    # a bare copy has no gen-data manifest beside it
    bare = tmp_path / "bare" / "data.csv"
    bare.parent.mkdir()
    shutil.copy(data, bare)
    out2 = tmp_path / "teacher2"
    assert _invoke("train-teacher", "--data", bare, *SMALL_NET, "--lambda", "0", "--out", out2).exit_code == 0
    dataset = json.loads((out2 / "manifest.json").read_text())["dataset"]
    assert dataset["seed"] is None
    assert dataset["sha256"] == hashlib.sha256(data.read_bytes()).hexdigest()


def test_distill_from_checkpoint(tmp_path, data_csv, teacher_ckpt):
    out = tmp_path / "student"
    result = _invoke("distill", "--teacher", teacher_ckpt, "--data", data_csv, "--epochs", "2", "--alpha", "0.1",
                     "--student-hidden-dims", "8", "--embed-dim", "6", "--out", out)
    assert result.exit_code == 0, result.output
    assert (out / "student.ckpt").exists() and (out / "distill_log.csv").exists()
    assert json.loads((out / "manifest.json").read_text())["role"] == "student"


def test_distill_missing_checkpoint_exits_three(tmp_path, data_csv):
    result = _invoke("distill", "--teacher", tmp_path / "absent.ckpt", "--data", data_csv, "--out", tmp_path / "s")
    assert result.exit_code == 3


def test_train_teacher_rejects_bad_lambda(tmp_path, data_csv):
    result = _invoke("train-teacher", "--data", data_csv, "--lambda=-1", "--out", tmp_path / "t")
    assert result.exit_code == 2


def test_verify_free_embeddings_pass(tmp_path):
    out = tmp_path / "verify"
    result = _invoke("verify", "--lambdas", "1", "--seeds", "0", "--steps", "200", "--out", out)
    assert result.exit_code == 0, result.output
    payload = json.loads((out / "verify.json").read_text())
    assert payload["summary"]["passed"] is True
    assert payload["summary"]["constants"]["c1"] == 1.0
    assert payload["summary"]["constants"]["c3"] == 1.0
    assert len(payload["bounds"]) == 1


def test_verify_detects_an_out_of_bounds_ratio(tmp_path):
    out = tmp_path / "verify"
    result = _invoke("verify", "--lambdas", "1", "--seeds", "0", "--steps", "50", "--inject-ratio", "1000",
                     "--out", out)
    assert result.exit_code == 1
    payload = json.loads((out / "verify.json").read_text())
    assert payload["summary"]["passed"] is False and payload["summary"]["failures"]


def test_verify_checkpoint_mode(tmp_path, data_csv, teacher_ckpt):
    out = tmp_path / "verify"
    result = _invoke("verify", "--checkpoint", teacher_ckpt, "--data", data_csv, "--m", "3", "--n", "4",
                     "--anchors", "5", "--out", out)
    assert result.exit_code == 0, result.output
    payload = json.loads((out / "verify.json").read_text())
    assert payload["distances"][0]["exact_residual"] < 1e-9
    assert all(row["converged"] is False for row in payload["bounds"])


def test_verify_checkpoint_needs_data(tmp_path, teacher_ckpt):
    assert _invoke("verify", "--checkpoint", teacher_ckpt, "--out", tmp_path / "v").exit_code == 2


def test_sweep_writes_tables(tmp_path, data_csv):
    out = tmp_path / "sweep"
    result = _invoke("sweep", "--data", data_csv, "--lambdas", "0,0.5", "--seeds", "0,1,2", "--epochs", "1",
                     "--batch-size", "16", "--capacity-m", "3", "--gate-ablation", "--out", out)
    assert result.exit_code == 0, result.output
    for name in ("sweep_cells.csv", "sweep_summary.csv", "metrics.csv", "sensitivity.csv", "config.json"):
        assert (out / name).exists()
    with open(out / "metrics.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    keys = [(r["experiment_id"], r["metric"], r["seed"]) for r in rows]
    assert len(keys) == len(set(keys))
    assert {r["experiment_id"] for r in rows} == {"lambda=0", "lambda=0.5"}
    with open(out / "sensitivity.csv", newline="") as f:
        assert "gate_gain" in next(csv.reader(f))


def test_sweep_rejects_missing_control(tmp_path, data_csv):
    result = _invoke("sweep", "--data", data_csv, "--lambdas", "0.1,0.5", "--seeds", "0,1,2", "--out", tmp_path)
    assert result.exit_code == 2


def test_report_summarizes_a_run(teacher_ckpt):
    run_dir = teacher_ckpt.parent
    assert _invoke("report", run_dir).exit_code == 0
    summary = json.loads((run_dir / "report.json").read_text())
    assert summary["command"] == "train-teacher"
    assert summary["train_log.csv"]["epochs"] == 2


def test_report_without_artifacts_exits_three(tmp_path):
    assert _invoke("report", tmp_path).exit_code == 3
    assert _invoke("report", tmp_path / "missing").exit_code == 3


def test_metrics_rows_must_be_unique(tmp_path):
    row = MetricsRow("lambda=0", "entropy", 0.5, 0, "abc")
    write_metrics([row, MetricsRow("lambda=0", "entropy", 0.4, 1, "abc")], tmp_path / "ok.csv")
    with pytest.raises(ContractError):
        write_metrics([row, row], tmp_path / "dup.csv")

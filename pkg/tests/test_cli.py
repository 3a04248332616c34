import json
import logging

import pytest
from typer.testing import CliRunner

from src.common.artifacts import read_jsonl
from src.main import app
from tests.conftest import REPO_ROOT, SAMPLE_DIR

runner = CliRunner()

TINY = ["--d", "4", "--k", "3", "--hidden", "6", "--batch_size", "16", "--lr", "0.01"]


@pytest.fixture(autouse=True)
def isolated_env(tmp_path, monkeypatch):
    monkeypatch.setenv("HIRS_OUT_DIR", str(tmp_path / "runs"))
    monkeypatch.setenv("HIRS_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.setenv("HIRS_DB_URL", f"sqlite:///{tmp_path / 'ledger.db'}")


def _summary(result) -> dict:
    for line in reversed(result.output.splitlines()):
        if line.startswith("{") and '"status"' in line:
            return json.loads(line)
    raise AssertionError(f"no summary line in output:\n{result.output}")


def _invoke(*args):
    return runner.invoke(app, [str(a) for a in args])


def test_train_evaluate_and_dump(tmp_path):
    out = tmp_path / "train"
    result = _invoke(
        "train", "-c", REPO_ROOT / "configs" / "run.cfg", "--seed", 1,
        "--ratings_path", SAMPLE_DIR / "ratings.dat",
        "--user_features_path", SAMPLE_DIR / "users.dat",
        "--item_features_path", SAMPLE_DIR / "movies.dat",
        "--epochs", 2, "--out_dir", out, *TINY,
    )
    assert result.exit_code == 0, result.output
    summary = _summary(result)
    assert summary["best_epoch"] in (1, 2)
    header, records = read_jsonl(out / "metrics.jsonl")
    assert header["hirs"] == "train"
    assert len(records) == 2

    data_args = [
        "--ratings_path", SAMPLE_DIR / "ratings.dat",
        "--user_features_path", SAMPLE_DIR / "users.dat",
        "--item_features_path", SAMPLE_DIR / "movies.dat",
    ]
    result = _invoke(
        "evaluate", "--seed", 1, "--checkpoint", out / "best.ckpt",
        "--out_dir", tmp_path / "eval", *data_args, *TINY,
    )
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / "eval" / "metrics.json").read_text())
    assert report["header"]["hirs"] == "evaluate"
    assert "recall@10" in report["metrics"]

    result = _invoke(
        "dump-interactions", "--seed", 1, "--checkpoint", out / "best.ckpt",
        "--dump_samples", 2, "--out_dir", tmp_path / "dump", *data_args, *TINY,
    )
    assert result.exit_code == 0, result.output
    dump = (tmp_path / "dump" / "interactions_0.txt").read_text().splitlines()
    assert dump[0].startswith("# hirs dump-interactions config_hash=")
    assert dump[1].startswith("feature")

    listing = _invoke("runs")
    assert listing.exit_code == 0
    assert "dump-interactions" in listing.output
    assert "completed" in listing.output


def test_gradcheck_command(tmp_path):
    result = _invoke("gradcheck", "--gradcheck_seeds", 2, "--out_dir", tmp_path / "gc")
    assert result.exit_code == 0, result.output
    assert _summary(result)["passed"] is True
    report = json.loads((tmp_path / "gc" / "gradcheck.json").read_text())
    assert len(report["seeds"]) == 2


def test_synth_gen_then_train_from_the_saved_dataset(tmp_path):
    result = _invoke(
        "synth-gen", "--spec_path", REPO_ROOT / "configs" / "synth.spec",
        "--synth_samples", 200, "--out_dir", tmp_path / "synth",
    )
    assert result.exit_code == 0, result.output
    truth = json.loads((tmp_path / "synth" / "ground_truth.json").read_text())
    assert 0.5 <= truth["bayes_accuracy"] <= 1.0
    result = _invoke(
        "train", "--dataset_path", tmp_path / "synth" / "synth.hirsdata", "--epochs", 1,
        "--out_dir", tmp_path / "t", *TINY,
    )
    assert result.exit_code == 0, result.output


def test_bench_scaling_writes_csv(tmp_path):
    result = _invoke(
        "bench-scaling", "--spec_path", REPO_ROOT / "configs" / "synth.spec",
        "--synth_samples", 100, "--bench_samples", 40, "--bench_ks", "2,4", "--bench_ms", "3,6",
        "--out_dir", tmp_path / "bench", *TINY,
    )
    assert result.exit_code == 0, result.output
    lines = (tmp_path / "bench" / "scaling.csv").read_text().splitlines()
    assert lines[0].startswith("# hirs bench-scaling")
    assert lines[1] == "k,m,seconds"
    assert len(lines) == 6


def test_unknown_key_exits_with_config_error():
    result = _invoke("train", "--dimension", 8)
    assert result.exit_code == 2
    assert "config_error" in result.output


def test_missing_checkpoint_is_an_artifact_error(tmp_path):
    result = _invoke(
        "evaluate", "--checkpoint", tmp_path / "none.ckpt",
        "--spec_path", REPO_ROOT / "configs" / "synth.spec", "--synth_samples", 50,
    )
    assert result.exit_code == 2
    assert "artifact_error" in result.output


def test_checkpoint_for_another_k_is_a_config_error(tmp_path):
    synth = ["--spec_path", REPO_ROOT / "configs" / "synth.spec", "--synth_samples", 120]
    result = _invoke("train", *synth, "--epochs", 1, "--out_dir", tmp_path / "t", *TINY)
    assert result.exit_code == 0, result.output
    result = _invoke(
        "evaluate", *synth, "--checkpoint", tmp_path / "t" / "last.ckpt",
        "--out_dir", tmp_path / "e", *TINY, "--k", 5,
    )
    assert result.exit_code == 2
    assert "config_error" in result.output
    assert "k=3 (config 5)" in result.output


def test_log_level_option(monkeypatch):
    root = logging.getLogger()
    monkeypatch.setattr(root, "level", root.level)
    result = _invoke("--log-level", "debug", "runs")
    assert result.exit_code == 0, result.output
    assert root.level == logging.DEBUG


def test_unknown_log_level_is_rejected():
    result = _invoke("--log-level", "LOUD", "runs")
    assert result.exit_code == 2

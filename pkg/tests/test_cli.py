"""End-to-end command-line tests: artifact layout, determinism, exit codes."""

import json
import os
import shutil

import pytest
from click.testing import CliRunner

from xlingqa.cli import main
from xlingqa.config import config_from_dict
from xlingqa.evalkit import read_json_lines

# Small enough that the whole gen -> augment -> train -> eval -> compare
# chain finishes in about a second.
TINY = [
    "--set", "world.num_languages=2",
    "--set", "world.vocab_size=256",
    "--set", "corpus.train_size=12",
    "--set", "corpus.eval_size=4",
    "--set", "train.epochs=1",
    "--set", "train.batch_size=8",
]


def run_cli(*args):
    return CliRunner().invoke(main, list(args))


def run_ok(*args):
    result = run_cli(*args)
    assert result.exit_code == 0, result.output
    return result


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One full CLI pass over a tiny experiment, shared by the tests below."""
    ws = tmp_path_factory.mktemp("cli")
    data = ws / "data"
    data_again = ws / "data-again"
    run_dir = ws / "run-tq"
    cmp_dir = ws / "cmp"

    out = {}
    out["gen"] = run_ok("gen", *TINY, "--seed", "3", "--out", str(data))
    out["gen_again"] = run_ok("gen", *TINY, "--seed", "3", "--out", str(data_again))
    # the augment stage below rewrites data/manifest.json, so keep gen's copy
    gen_manifest = (data / "manifest.json").read_text()
    out["augment"] = run_ok(
        "augment", *TINY, "--seed", "3", "--data", str(data), "--out", str(data), "--strategy", "tq"
    )
    out["train"] = run_ok(
        "train", *TINY, "--set", "train.method=tq", "--seed", "3",
        "--data", str(data), "--out", str(run_dir),
    )
    out["eval"] = run_ok("eval", *TINY, "--seed", "3", "--data", str(data), "--out", str(run_dir))
    out["compare"] = run_ok(
        "compare", *TINY, "--seed", "3",
        "--a", str(run_dir), "--b", str(run_dir), "--out", str(cmp_dir), "--data", str(data),
    )
    return {
        "ws": ws,
        "data": data,
        "data_again": data_again,
        "run": run_dir,
        "cmp": cmp_dir,
        "results": out,
        "gen_manifest": gen_manifest,
    }


def test_version_and_help():
    version = run_ok("--version")
    assert "xlingqa" in version.output
    listing = run_ok("--help").output
    for command in ("gen", "augment", "train", "eval", "compare", "stats"):
        assert command in listing


def test_gen_writes_corpus_and_reports_metrics(workspace):
    data = workspace["data"]
    for name in ("world.json", "train.jsonl", "eval.jsonl", "manifest.json"):
        assert (data / name).is_file()
    metrics = json.loads(workspace["results"]["gen"].output)
    assert metrics["train_examples"] == 12
    assert metrics["eval_rows"] == 36  # 4 base examples x 3x3 language cells
    assert metrics["languages"] == ["en", "de", "es"]
    assert sum(metrics["question_types"].values()) == 12


def test_gen_is_byte_deterministic(workspace):
    data, again = workspace["data"], workspace["data_again"]
    for name in ("world.json", "train.jsonl", "eval.jsonl"):
        assert (data / name).read_bytes() == (again / name).read_bytes()
    first = json.loads(workspace["gen_manifest"])
    second = json.loads((again / "manifest.json").read_text())
    first.pop("wall_clock_seconds")
    second.pop("wall_clock_seconds")
    # artifact paths embed the directory name; everything else must agree
    first.pop("artifacts")
    second.pop("artifacts")
    assert first == second


def test_manifest_records_command_config_and_artifacts(workspace):
    manifest = json.loads((workspace["run"] / "manifest.json").read_text())
    assert manifest["command"] == "eval"  # eval ran last in that directory
    assert manifest["version"]
    config_from_dict(manifest["config"])  # stored config must round-trip
    assert manifest["config"]["seed"] == 3
    for path in manifest["artifacts"].values():
        assert os.path.exists(path)
    assert manifest["final_metrics"] == json.loads(workspace["results"]["eval"].output)


def test_augment_writes_dataset_and_stats_sidecar(workspace):
    data = workspace["data"]
    rows = read_json_lines(data / "aug-tq.jsonl")
    assert len(rows) == 36  # 12 base x (en + 2 translated question languages)
    metrics = json.loads(workspace["results"]["augment"].output)
    assert metrics == {
        "strategy": "tq",
        "size": 36,
        "kept": {"de": 12, "en": 12, "es": 12},
        "failed": {"de": 0, "en": 0, "es": 0},
    }
    sidecar = json.loads((data / "aug-tq.stats.json").read_text())
    assert sidecar["strategy"] == "tq"
    assert sidecar["stats"]["total_pairs"] == 36
    assert sidecar["kept"] == {"de": 12, "en": 12, "es": 12}


def test_train_writes_checkpoint_and_trace(workspace):
    run_dir = workspace["run"]
    assert (run_dir / "checkpoint.bin").stat().st_size > 0
    trace = (run_dir / "trace.csv").read_text().splitlines()
    assert trace[0] == "step,name,value"
    assert len(trace) > 1
    metrics = json.loads(workspace["results"]["train"].output)
    assert metrics["steps"] == 5  # 36 examples / batch 8, one epoch
    assert isinstance(metrics["qa_loss"], float)


def test_eval_writes_report_and_predictions(workspace):
    run_dir, data = workspace["run"], workspace["data"]
    report = json.loads((run_dir / "report.json").read_text())
    assert sorted(report) == ["counts", "gxlt", "matrix", "xlt"]
    predictions = read_json_lines(run_dir / "predictions.jsonl")
    eval_ids = {r["id"] for r in read_json_lines(data / "eval.jsonl")}
    assert {r["id"] for r in predictions} == eval_ids
    metrics = json.loads(workspace["results"]["eval"].output)
    assert metrics["examples"] == 36
    assert metrics["xlt"] == pytest.approx(report["xlt"])


def test_comparing_a_run_against_itself_is_null(workspace):
    cmp_dir = workspace["cmp"]
    payload = json.loads((cmp_dir / "compare.json").read_text())
    assert payload["p_value"] == 1.0
    assert payload["statistic"] == 0.0
    assert payload["n_pairs"] == 36
    assert payload["wins_a"] == payload["wins_b"] == 0
    assert payload["ties"] == 36
    assert read_json_lines(cmp_dir / "analysis.jsonl") == []
    assert json.loads(workspace["results"]["compare"].output) == payload


def test_stats_reports_dataset_composition(workspace):
    result = run_ok("stats", "--data", str(workspace["data"] / "train.jsonl"))
    stats = json.loads(result.output)
    assert stats["language_pairs"] == {"en.en": 12}
    assert sum(stats["question_types"].values()) == 12
    aug_stats = json.loads(
        run_ok("stats", "--data", str(workspace["data"] / "aug-tq.jsonl")).output
    )
    assert sum(aug_stats["language_pairs"].values()) == 36


def test_stats_validates_report_consistency(workspace):
    result = run_ok("stats", "--report", str(workspace["run"] / "report.json"))
    stats = json.loads(result.output)
    assert stats["consistent"] is True
    assert stats["recomputed_xlt"] == pytest.approx(stats["xlt"], abs=1e-9)
    assert stats["recomputed_gxlt"] == pytest.approx(stats["gxlt"], abs=1e-9)


def test_seed_option_changes_the_corpus(workspace, tmp_path):
    other = tmp_path / "other-seed"
    run_ok("gen", *TINY, "--seed", "4", "--out", str(other))
    assert (other / "train.jsonl").read_bytes() != (workspace["data"] / "train.jsonl").read_bytes()


def test_overrides_and_seed_option_beat_the_config_file(tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(
        json.dumps(
            {
                "seed": 1,
                "world": {"num_languages": 2, "vocab_size": 256},
                "corpus": {"train_size": 5, "eval_size": 2},
            }
        )
    )
    out = tmp_path / "out"
    result = run_ok(
        "gen", "--config", str(cfg), "--set", "corpus.train_size=7", "--seed", "9", "--out", str(out)
    )
    assert json.loads(result.output)["train_examples"] == 7
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 9
    assert manifest["config"]["corpus"]["train_size"] == 7


@pytest.mark.parametrize(
    "args, message",
    [
        (("gen", "--set", "world.num_languages=0"), "at least one synthetic language"),
        (("gen", "--set", "corpus.train_size=0"), "must be positive"),
        (("gen", "--set", "bogus.key=1"), "unknown key 'bogus'"),
        (("gen", "--set", "train.turbo=true"), "unknown key 'turbo'"),
        (("gen", "--set", "noequals"), "not of the form key=value"),
    ],
    ids=["zero-languages", "empty-corpus", "unknown-section", "unknown-field", "bad-override"],
)
def test_configuration_errors_exit_with_code_two(tmp_path, args, message):
    result = run_cli(*args, "--out", str(tmp_path / "out"))
    assert result.exit_code == 2
    assert message in result.output


def test_bare_stats_is_a_configuration_error():
    result = run_cli("stats")
    assert result.exit_code == 2
    assert "needs a dataset file or a report file" in result.output


def test_unknown_strategy_exits_with_code_two(workspace, tmp_path):
    result = run_cli(
        "augment", "--data", str(workspace["data"]), "--out", str(tmp_path / "out"),
        "--strategy", "bogus",
    )
    assert result.exit_code == 2
    assert "unknown augmentation strategy 'bogus'" in result.output


def test_missing_input_directory_exits_with_code_one(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    result = run_cli("augment", "--data", str(empty), "--out", str(tmp_path / "out"))
    assert result.exit_code == 1
    assert "world.json" in result.output


def test_missing_eval_file_exits_with_code_one(workspace, tmp_path):
    partial = tmp_path / "partial"
    partial.mkdir()
    shutil.copy(workspace["data"] / "world.json", partial / "world.json")
    result = run_cli("eval", "--data", str(partial), "--out", str(tmp_path / "out"))
    assert result.exit_code == 1
    assert str(partial / "eval.jsonl") in result.output
    assert "does not exist" in result.output


def test_malformed_config_file_exits_with_code_two(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text("{not json")
    result = run_cli("gen", "--config", str(cfg), "--out", str(tmp_path / "out"))
    assert result.exit_code == 2
    assert "malformed config JSON" in result.output


def test_resume_without_a_checkpoint_exits_with_code_one(workspace, tmp_path):
    fresh = tmp_path / "fresh"
    result = run_cli(
        "train", *TINY, "--resume", "--data", str(workspace["data"]), "--out", str(fresh)
    )
    assert result.exit_code == 1
    assert "checkpoint.bin" in result.output

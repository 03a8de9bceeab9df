import json
import os
from pathlib import Path

import pytest

from langlift import cli
from langlift import pipeline as pl


@pytest.fixture(scope="module")
def tiny_workdir(tmp_path_factory):
    """A fully-populated workdir from the smoke-scale pipeline."""
    workdir = str(tmp_path_factory.mktemp("cliwork"))
    cfg = pl.tiny_config(seed=1)
    pl.run_all(cfg, workdir)
    return workdir


def run_cli(args, workdir):
    return cli.main(["--workdir", workdir] + args)


def test_run_all_writes_report_and_manifest(tiny_workdir):
    report = json.loads(Path(tiny_workdir, "report", "report.json").read_text())
    assert "per_language" in report and "X" in report["per_language"]
    manifest = json.loads(Path(tiny_workdir, "manifest.json").read_text())
    steps = [e["step"] for e in manifest]
    for step in ("gen-world", "learn-vocab", "merge-vocab", "build-data",
                 "train-original", "extend", "train-transfer", "evaluate"):
        assert step in steps
    assert all(e["tool_version"] == pl.TOOL_VERSION for e in manifest)


def test_unknown_flag_exits_nonzero(tiny_workdir, capsys):
    with pytest.raises(SystemExit) as err:
        cli.main(["--workdir", tiny_workdir, "run-all", "--no-such-flag"])
    assert err.value.code != 0


def test_unknown_subcommand_exits_nonzero(tiny_workdir):
    with pytest.raises(SystemExit) as err:
        cli.main(["--workdir", tiny_workdir, "frobnicate"])
    assert err.value.code != 0


def test_missing_config_file_is_an_error(tmp_path):
    with pytest.raises(SystemExit) as err:
        cli.main(["--workdir", str(tmp_path), "--config", str(tmp_path / "nope.json"),
                  "gen-world"])
    assert err.value.code != 0


def test_infer_missing_checkpoint(tiny_workdir, tmp_path):
    turns = tmp_path / "turns.jsonl"
    turns.write_text('{"query": "QO BO"}\n')
    with pytest.raises(SystemExit) as err:
        cli.main(["--workdir", tiny_workdir, "infer", "--checkpoint", "never_trained",
                  "--input", str(turns), "--output", str(tmp_path / "out.jsonl")])
    assert err.value.code != 0


def test_infer_writes_parse_records(tiny_workdir, tmp_path):
    spec_doc = json.loads(Path(tiny_workdir, "world", "X", "spec.json").read_text())
    x_word = list(spec_doc["cipher"].values())[0]
    turns = tmp_path / "turns.jsonl"
    turns.write_text(json.dumps({"query": x_word}) + "\n")
    out = tmp_path / "out.jsonl"
    assert run_cli(["infer", "--checkpoint", "final", "--input", str(turns),
                    "--output", str(out), "--raw", "--max-new", "8"], tiny_workdir) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 1
    assert "mode" in rows[0]
    assert "output_ids" in rows[0]  # --raw dumps token streams


def test_eval_delta_runs(tiny_workdir, capsys):
    assert run_cli(["eval-delta", "--checkpoint-a", "final",
                    "--checkpoint-b", "direct_sft"], tiny_workdir) == 0
    doc = json.loads(capsys.readouterr().out)
    assert "delta" in doc and "binomial_p" in doc


def test_analyze_forgetting_runs(tiny_workdir, capsys):
    assert run_cli(["analyze-forgetting", "--checkpoint", "final",
                    "--reference", "extended"], tiny_workdir) == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc) == {"difference", "p_model", "p_original"}


def test_analyze_similarity_runs(tiny_workdir, capsys):
    assert run_cli(["analyze-similarity", "--checkpoint", "final_premerge"],
                   tiny_workdir) == 0
    doc = json.loads(capsys.readouterr().out)
    assert "en_segment" in doc and "x_segment" in doc


def test_lock_prevents_concurrent_runs(tiny_workdir):
    lock = Path(tiny_workdir, "run.lock")
    lock.write_text("12345")
    try:
        with pytest.raises(SystemExit):
            cli.main(["--workdir", tiny_workdir, "run-all"])
    finally:
        lock.unlink()


def test_stale_vocab_hash_rejected(tiny_workdir, tmp_path):
    # poison one dataset manifest and try to retrain against it
    manifest_path = Path(tiny_workdir, "data", "stage1.manifest.json")
    doc = json.loads(manifest_path.read_text())
    original = manifest_path.read_text()
    doc["vocab_hash"] = "0" * 16
    manifest_path.write_text(json.dumps(doc))
    try:
        with pytest.raises(SystemExit) as err:
            cli.main(["--workdir", tiny_workdir, "train", "--stage", "target-cpt"])
        assert err.value.code != 0
    finally:
        manifest_path.write_text(original)


def test_config_round_trip(tmp_path):
    cfg = pl.tiny_config(seed=3)
    path = tmp_path / "config.json"
    path.write_text(cfg.to_json())
    loaded = pl.RunConfig.from_json(path.read_text())
    assert loaded.to_json() == cfg.to_json()


def test_config_rejects_unknown_fields():
    bad = json.dumps({"version": 1, "not_a_field": 2})
    with pytest.raises(pl.PipelineError):
        pl.RunConfig.from_json(bad)

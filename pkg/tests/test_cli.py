import json
import subprocess
import sys

import numpy as np
import pytest

from kgtransfer import cli
from kgtransfer.errors import NumericError
from kgtransfer.kg import read_manifest
from kgtransfer.pretrain import checkpoint_digest, load_checkpoint

SMALL = {"encoder": {"kind": "rsn", "dim": 8, "dropout_rate": 0.0},
         "walk": {"path_length": 5, "walks_per_start": 1},
         "nce": {"k": 3},
         "pretrain": {"epochs": 1, "batch_size": 256},
         "retrain": {"epochs": 2, "batch_size": 256},
         "distill": {"valid_every": 1}}


def write_config(directory, **overrides):
    doc = {"setting": "pr4lp", "output_dir": "out",
           "data": {"train": "data/train.tsv", "valid": "data/valid.tsv",
                    "test": "data/test.tsv", "background": ["data/background.tsv"],
                    "alignment": ["data/alignment.tsv"]}, **SMALL}
    doc.update(overrides)
    path = directory / "run.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def workdir(tmp_path, scenario):
    scenario.write(tmp_path / "data")
    return tmp_path


def test_usage_errors_exit_1(capsys):
    for argv in ([], ["frobnicate", "--config", "x"], ["eval"]):
        with pytest.raises(SystemExit) as err:
            cli.main(argv)
        assert err.value.code == 1


def test_version(capsys):
    with pytest.raises(SystemExit) as err:
        cli.main(["--version", "eval", "--config", "x"])
    assert err.value.code == 0
    assert capsys.readouterr().out.startswith("kgtransfer ")


def test_config_error_exit_1(workdir, capsys):
    path = write_config(workdir, bogus=True)
    assert cli.main(["ingest", "--config", str(path)]) == 1
    assert "bogus: unknown key" in capsys.readouterr().err


def test_data_error_exit_2(workdir, capsys):
    (workdir / "data" / "train.tsv").write_text("a\tr\n")
    path = write_config(workdir)
    assert cli.main(["ingest", "--config", str(path)]) == 2
    assert "train.tsv:1" in capsys.readouterr().err
    quarantined = workdir / "out" / "quarantine" / "ingest-0"
    assert (quarantined / "error.txt").exists() and (quarantined / "config.json").exists()
    assert not (workdir / "out" / "ingest").exists()


def test_numeric_error_exit_3(workdir, monkeypatch):
    def boom(*args):
        raise NumericError("diverged")
    monkeypatch.setitem(cli.HANDLERS, "ingest", boom)
    path = write_config(workdir)
    assert cli.main(["ingest", "--config", str(path)]) == 3
    assert cli.main(["ingest", "--config", str(path)]) == 3
    assert (workdir / "out" / "quarantine" / "ingest-1" / "error.txt").read_text() == \
        "NumericError: diverged\n"


def test_missing_checkpoint_for_eval(workdir):
    path = write_config(workdir)
    assert cli.main(["eval", "--config", str(path)]) == 2


def test_full_pipeline(workdir, capsys):
    path = str(write_config(workdir))
    for command in cli.COMMANDS:
        assert cli.main([command, "--config", path, "--log-format", "text"]) == 0, command
    out = workdir / "out"
    for command in cli.COMMANDS:
        manifest = read_manifest(out / command / "manifest.txt")
        assert manifest["command"] == command and manifest["setting"] == "pr4lp"
        assert len(manifest["input.train"]) == 64
        assert json.loads((out / command / "config.json").read_text())["setting"] == "pr4lp"
    assert not list(out.glob(".*.partial"))
    assert (out / "pretrain" / "checkpoint").is_dir()
    assert (out / "retrain" / "subgraph" / "alignment.tsv").exists()
    assert read_manifest(out / "retrain" / "manifest.txt")["input.teacher"]
    retrain_metrics = json.loads((out / "retrain" / "metrics.json").read_text())
    eval_metrics = json.loads((out / "eval" / "metrics.json").read_text())
    assert retrain_metrics == eval_metrics and eval_metrics["setting"] == "PR4LP"
    assert "t_c" in (out / "mine-rules" / "rules.txt").read_text()
    rows = (out / "project" / "projection.tsv").read_text().splitlines()
    assert rows[0] == "label\tx\ty" and len(rows) > 2
    assert (out / "sample-paths" / "corpus.bin").stat().st_size > 0
    stats = read_manifest(out / "ingest" / "stats.txt")
    assert int(stats["test"]) > 0


def test_ablation_matches_lp(workdir):
    lp = write_config(workdir, setting="lp", output_dir="lp")
    assert cli.main(["retrain", "--config", str(lp)]) == 0
    ab = write_config(workdir, output_dir="ab", budget=0,
                      distill={"valid_every": 1, "alpha": 0.0, "beta": 0.0})
    assert cli.main(["retrain", "--config", str(ab)]) == 0
    a = load_checkpoint(workdir / "lp" / "retrain" / "checkpoint")
    b = load_checkpoint(workdir / "ab" / "retrain" / "checkpoint")
    assert checkpoint_digest(a) == checkpoint_digest(b)


def test_eval_memorization_toy(tmp_path):
    # every wrong tail and head completes a training triplet, so filtered ranks are all 1
    d = tmp_path / "data"
    d.mkdir()
    train = [("a", "a"), ("a", "b"), ("a", "c"), ("b", "d"), ("c", "d"), ("d", "d")]
    (d / "train.tsv").write_text("".join(f"{s}\tr\t{o}\n" for s, o in train))
    (d / "valid.tsv").write_text("b\tr\tb\n")
    (d / "test.tsv").write_text("a\tr\td\n")
    doc = {"setting": "lp", "output_dir": "out",
           "data": {"train": "data/train.tsv", "valid": "data/valid.tsv", "test": "data/test.tsv"},
           **SMALL}
    (tmp_path / "run.json").write_text(json.dumps(doc))
    for command in ("retrain", "eval"):
        assert cli.main([command, "--config", str(tmp_path / "run.json")]) == 0
    metrics = json.loads((tmp_path / "out" / "eval" / "metrics.json").read_text())
    assert metrics["mrr"] == 1.0 and metrics["hits@1"] == 1.0


def test_console_script(workdir):
    path = write_config(workdir, setting="lp")
    proc = subprocess.run([sys.executable, "-m", "kgtransfer.cli", "ingest", "--config",
                           str(path)], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith("target_entities=")
    for line in proc.stderr.splitlines():
        json.loads(line)

import json

import pytest

from kgtransfer.config import ConfigErrors, RunConfig, load_config, validate_config
from kgtransfer.distill import DistillConfig
from kgtransfer.encoders import EncoderConfig


@pytest.fixture
def data_dir(tmp_path, scenario):
    scenario.write(tmp_path / "data")
    return tmp_path


def lp_doc():
    return {"setting": "lp", "output_dir": "out",
            "data": {"train": "data/train.tsv", "valid": "data/valid.tsv", "test": "data/test.tsv"}}


def test_minimal_lp_config(data_dir):
    cfg = validate_config(lp_doc(), data_dir)
    assert isinstance(cfg, RunConfig)
    assert cfg.encoder == EncoderConfig() and cfg.distill == DistillConfig()
    assert cfg.seed == 0 and cfg.threads == 1 and cfg.budget is None
    assert cfg.output_dir == str((data_dir / "out").resolve())
    assert cfg.data.train == str((data_dir / "data/train.tsv").resolve())
    assert json.loads(cfg.to_json())["setting"] == "lp"
    assert cfg.digest() == validate_config(lp_doc(), data_dir).digest()


def test_pr4lp_without_teacher(data_dir):
    doc = lp_doc()
    doc["setting"] = "pr4lp"
    doc["data"].update(background=["data/background.tsv"], alignment=["data/alignment.tsv"])
    with pytest.raises(ConfigErrors) as err:
        validate_config(doc, data_dir)
    assert any(p.startswith("data.teacher") for p in err.value.problems)
    doc["pretrain"] = {"epochs": 1}
    assert validate_config(doc, data_dir).pretrain.epochs == 1


def test_unknown_keys_and_many_problems(data_dir):
    doc = lp_doc()
    doc["bogus"] = 1
    doc["encoder"] = {"kind": "rsn", "depth": 3}
    doc["budget"] = -2
    doc["data"]["train"] = "data/missing.tsv"
    with pytest.raises(ConfigErrors) as err:
        validate_config(doc, data_dir)
    problems = err.value.problems
    assert "bogus: unknown key" in problems
    assert "encoder.depth: unknown key" in problems
    assert any(p.startswith("budget:") for p in problems)
    assert any(p.startswith("data.train: path does not exist") for p in problems)


def test_joint_settings_need_background(data_dir):
    doc = lp_doc()
    doc["setting"] = "joint-lp"
    with pytest.raises(ConfigErrors, match="data.background"):
        validate_config(doc, data_dir)
    doc["setting"] = "nope"
    with pytest.raises(ConfigErrors, match="setting"):
        validate_config(doc, data_dir)


def test_invalid_section_value(data_dir):
    doc = lp_doc()
    doc["walk"] = {"path_length": 4}
    with pytest.raises(ConfigErrors, match="walk"):
        validate_config(doc, data_dir)


def test_seed_override(data_dir):
    cfg = validate_config(lp_doc(), data_dir)
    assert cfg.walk.seed == 0
    doc = lp_doc()
    doc["walk"] = {"seed": 5}
    assert validate_config(doc, data_dir).walk.seed == 5
    over = validate_config(doc, data_dir, seed=9)
    assert (over.seed, over.walk.seed, over.nce.seed, over.retrain.seed) == (9, 9, 9, 9)


def test_threads_env(data_dir, monkeypatch):
    monkeypatch.setenv("KGTRANSFER_THREADS", "3")
    assert validate_config(lp_doc(), data_dir).threads == 3
    monkeypatch.setenv("KGTRANSFER_THREADS", "zero")
    with pytest.raises(ConfigErrors, match="threads"):
        validate_config(lp_doc(), data_dir)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigErrors, match="not found"):
        load_config(tmp_path / "none.json")
    (tmp_path / "bad.json").write_text("{ not json")
    with pytest.raises(ConfigErrors, match="invalid JSON"):
        load_config(tmp_path / "bad.json")

import dataclasses
import json

import pytest

from emtrack.config import PipelineConfig, RoundConfig, load_config
from emtrack.detectors import TrainConfig
from emtrack.discovery import FusionConfig


def test_json_round_trip():
    cfg = PipelineConfig(rounds=2, seed=7, flow_noise=0.5)
    assert PipelineConfig.from_dict(json.loads(cfg.to_json())) == cfg


def test_nested_override_from_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"rounds": 1, "fusion": {"threshold": 0.5}}))
    cfg = load_config(p)
    assert cfg.rounds == 1
    assert cfg.fusion.threshold == 0.5
    assert cfg.train == PipelineConfig().train


def test_missing_path_gives_defaults():
    assert load_config(None) == PipelineConfig()


def test_unknown_keys_rejected():
    with pytest.raises(ValueError, match="unknown"):
        PipelineConfig.from_dict({"roundz": 2})
    with pytest.raises(ValueError, match="unknown"):
        PipelineConfig.from_dict({"fusion": {"bogus": 1}})


def test_invalid_values_rejected():
    with pytest.raises(ValueError):
        PipelineConfig(rounds=0)
    with pytest.raises(ValueError):
        PipelineConfig(flow_source="raft")


def test_round_one_is_handcrafted():
    cfg = PipelineConfig()
    assert cfg.round_config(1).mode == "handcrafted"
    assert cfg.round_config(2).mode == "ensemble"
    with pytest.raises(ValueError):
        RoundConfig(1, "ensemble", TrainConfig(), FusionConfig(), 0)


def test_round_budgets_and_seeds():
    cfg = PipelineConfig(seed=3)
    r1, r2 = cfg.round_config(1), cfg.round_config(2)
    assert r1.train.iters == cfg.train.iters
    assert r2.train.iters == cfg.warm_iters
    assert r1.seed != r2.seed
    assert dataclasses.replace(cfg).round_config(2) == r2

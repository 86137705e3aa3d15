import json

import pytest

from clusvpr.config import ConfigError, RunConfig, load_config, preset


def test_published_defaults():
    c = RunConfig()
    m, t = c.model, c.train
    assert (m.k_n, m.clusters, m.expansion, m.groups, m.out_dim, m.cwt_blocks, m.rate, m.lambda_c) == (
        10, 64, 2, 8, 4096, 4, 2, 0.5)
    assert (t.lr, t.weight_decay, t.momentum, t.negatives, t.pos_radius, t.neg_radius, t.pool) == (
        1e-4, 1e-3, 0.9, 10, 10.0, 25.0, 500)
    assert (t.generations, t.epochs, t.lambda_s, t.k_pos) == (5, 8, 0.55, 4)
    assert t.temperatures == (0.06,) * 5


@pytest.mark.parametrize("name", ["default", "desk", "tiny"])
def test_presets_validate(name):
    preset(name).validate()


def test_unknown_key_named(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"lr": 0.1, "bogus": 1}}))
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert err.value.key == "train.bogus"


def test_unknown_section_and_bad_value(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"extra": {}}))
    with pytest.raises(ConfigError, match="extra"):
        load_config(path)
    path.write_text(json.dumps({"model": {"groups": 7}}))
    with pytest.raises(ConfigError, match="model.groups"):
        load_config(path)


def test_file_extends_preset(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"preset": "tiny", "train": {"epochs": 3}}))
    c = load_config(path)
    assert c.train.epochs == 3 and c.model.clusters == preset("tiny").model.clusters


def test_dumps_roundtrip(tmp_path):
    c = preset("desk")
    path = tmp_path / "r.json"
    path.write_text(c.dumps())
    assert load_config(path) == c


def test_missing_config():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.json")


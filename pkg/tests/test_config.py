import json

import pytest

import config


def test_overrides_apply_after_file_last_wins():
    base = {"train": {"lr": 0.0001, "epochs": 5}, "name": "x"}
    out = config.apply_overrides(base, ["train.lr=0.01", "train.lr=0.5", "name=y"])
    assert out["train"]["lr"] == 0.5
    assert out["train"]["epochs"] == 5
    assert out["name"] == "y"
    assert base["train"]["lr"] == 0.0001


def test_override_values_parse_as_json_when_possible():
    out = config.apply_overrides({}, ["a.b=true", "a.c=[1, 2]", "a.d=rmsprop", "e=1e-4"])
    assert out == {"a": {"b": True, "c": [1, 2], "d": "rmsprop"}, "e": 1e-4}


@pytest.mark.parametrize("bad", ["novalue", "=3"])
def test_malformed_override_rejected(bad):
    with pytest.raises(ValueError):
        config.apply_overrides({}, [bad])


def test_load_json_config_rejects_non_objects(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps([1, 2]))
    with pytest.raises(ValueError, match="not a JSON object"):
        config.load_json_config(path)

    path.write_text(json.dumps({"seed": 1}))
    assert config.load_json_config(path) == {"seed": 1}

import json

import pytest

from errors import ConfigError
from experiment_config import (BenchConfig, ExperimentConfig, TheoryConfig, load_config,
                               load_small_config, save_config)


def test_defaults():
    config = ExperimentConfig.from_dict({})
    assert config.mask.fraction == 0.01
    assert config.zo.draws == "compact"
    assert config.seed == 0


@pytest.mark.parametrize("doc", [
    {"mask": {"fraction": 0}},
    {"mask": {"fraction": 1.5}},
    {"zo": {"eps": -1e-3}},
    {"zo": {"mask_mode": "sideways"}},
    {"model": {"sizes": [3]}},
    {"task": {"n_samples": 100}},
    {"unknown": 1},
    {"loss": "hinge"},
])
def test_schema_errors(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


def test_roundtrip_through_file(tmp_path):
    config = ExperimentConfig.from_dict({"mask": {"fraction": 0.05, "scope": "global"},
                                         "zo": {"seed": 11}})
    again = load_config(save_config(tmp_path / "config.json", config))
    assert again == config


def test_missing_and_malformed_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_referenced_files_must_exist(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"mask": {"path": str(tmp_path / "mask.json")}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"task": {"source": "file"}})


def test_relative_paths_resolve_against_config_dir(tmp_path):
    (tmp_path / "mask.json").write_text("{}", encoding="utf-8")
    (tmp_path / "config.json").write_text(json.dumps({"mask": {"path": "mask.json"}}),
                                          encoding="utf-8")
    config = load_config(tmp_path / "config.json")
    assert config.mask.path == str(tmp_path / "mask.json")


def test_with_seed_and_overrides():
    config = ExperimentConfig.from_dict({})
    seeded = config.with_seed(42)
    assert seeded.seed == 42 and config.seed == 0
    changed = config.with_overrides(mask={"fraction": 0.1}, out_dir="elsewhere")
    assert changed.mask.fraction == 0.1 and changed.mask.scope == config.mask.scope
    assert changed.out_dir == "elsewhere"
    with pytest.raises(ConfigError):
        config.with_overrides(mask={"fraction": 2.0})


def test_small_configs(tmp_path):
    assert load_small_config(TheoryConfig, None) == TheoryConfig()
    path = tmp_path / "theory.json"
    path.write_text(json.dumps({"T": 100, "lr_scale": 2}), encoding="utf-8")
    theory = load_small_config(TheoryConfig, str(path))
    assert theory.T == 100 and theory.lr_scale == 2

    bench = tmp_path / "bench.json"
    bench.write_text(json.dumps({"sizes": [[8, 8]], "repeats": 3}), encoding="utf-8")
    assert load_small_config(BenchConfig, str(bench)).sizes == [[8, 8]]

    path.write_text(json.dumps({"T": "long"}), encoding="utf-8")
    with pytest.raises(ConfigError):
        load_small_config(TheoryConfig, str(path))
    with pytest.raises(ConfigError):
        load_small_config(TheoryConfig, str(tmp_path / "none.json"))

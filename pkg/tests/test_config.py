import json

import pytest

from mad import config
from mad.errors import ConfigError


def test_defaults_roundtrip():
    cfg = config.from_dict({})
    again = config.from_dict(cfg.to_json())
    assert again.to_json() == cfg.to_json()
    assert again.hash() == cfg.hash()


def test_hash_ignores_out_but_not_seed():
    a = config.from_dict({"out": "x"})
    assert a.hash() == config.from_dict({"out": "y"}).hash()
    assert a.hash() != config.from_dict({"seed": 1}).hash()
    assert len(a.hash()) == 16
    assert a.provenance()["config_hash"] == a.hash()


def test_split_assignment_and_run_name():
    cfg = config.from_dict({"seed": 2, "mode": "baseline", "synth": {"n_slides": 5}, "tiling": {"n_test": 2}})
    assert cfg.split_assignment() == {"TRAIN": ["slide_00", "slide_01", "slide_02"], "TEST": ["slide_03", "slide_04"]}
    assert cfg.run_name() == "baseline-seed2"
    tc = cfg.train_config()
    assert (tc.seed, tc.mode) == (2, "BASELINE")
    assert cfg.eval_config().seed == 2


def test_nested_sections_parse():
    cfg = config.from_dict({
        "synth": {"texture_amp": [0, 0.1, 0.1, 0.1, 0.1], "class_palette": [[1, 1, 1]] * 5},
        "train": {"steps": 7, "aug": {"solarize_prob": 0.0}, "vit": {"depth": 2}},
        "eval": {"k": 5, "probe": {"epochs": 3}},
    })
    assert cfg.train.steps == 7 and cfg.train.aug.solarize_prob == 0.0
    assert cfg.vit.depth == 2 and cfg.eval.k == 5 and cfg.eval.probe.epochs == 3
    assert cfg.synth.class_palette[0] == (1, 1, 1)


@pytest.mark.parametrize(
    "d",
    [
        {"bogus": 1},
        {"synth": {"bogus": 1}},
        {"train": {"vit": {"bogus": 1}}},
        {"train": {"seed": 3}},
        {"eval": {"bogus": 1}},
        {"mode": "other"},
        {"synth": {"n_slides": 1}},
        {"tiling": {"n_test": 10}},
        {"tiling": {"tile_px": 16}, "synth": {"tile_px": 32}},
        {"seed": -1},
    ],
)
def test_rejects_bad_configs(d):
    with pytest.raises(ConfigError):
        config.from_dict(d)


def test_load_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 1, "mode": "MAD"}))
    cfg = config.load(p, seed=9, mode="BASELINE")
    assert (cfg.seed, cfg.mode) == (9, "BASELINE")
    with pytest.raises(ConfigError):
        config.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        config.load(tmp_path / "bad.json")


def test_bundled_desk_config_loads():
    cfg = config.load(config.bundled("desk.json"))
    assert cfg.split_assignment()["TEST"] == ["slide_08", "slide_09"]
    assert len(cfg.split_assignment()["TRAIN"]) == 8
    assert cfg.tiling.tile_px == 32

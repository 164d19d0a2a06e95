import json

import pytest

from reefbench.config import Config, ConfigError, from_dict, load_config, save_config


def test_defaults_validate_and_roundtrip(tmp_path):
    cfg = Config()
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg
    assert from_dict(cfg.to_dict()) == cfg


def test_unknown_key_reports_path(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"scanner": {"beams": 10}}))
    with pytest.raises(ConfigError, match=r"scanner: unknown key\(s\) beams"):
        load_config(tmp_path / "c.json")
    with pytest.raises(ConfigError, match="detector.icp.nope"):
        Config().replace(**{"detector.icp.nope": 1})


def test_type_errors_carry_key_path():
    with pytest.raises(ConfigError, match="scanner.beam_count"):
        from_dict({"scanner": {"beam_count": "many"}})
    with pytest.raises(ConfigError, match="scanner.beam_count"):
        from_dict({"scanner": {"beam_count": 2.5}})
    with pytest.raises(ConfigError, match="scanner"):
        from_dict({"scanner": 3})


def test_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "c.json")


@pytest.mark.parametrize(
    "key,value",
    [
        ("scanner.beam_count", 1025),
        ("scanner.beam_count", 0),
        ("scanner.dropout_prob", 1.0),
        ("scanner.noise_sigma", -0.1),
        ("scanner.swath_half_angle", 90),
        ("scanner.direction_mode", "z"),
        ("detector.window.stride_fraction", 0),
        ("scene.margin", 40),
        ("templates.rmse_threshold.reef_ring", 0),
        ("terrain.octaves", 0),
    ],
)
def test_validation_rejects(key, value):
    with pytest.raises(ConfigError, match=key.split(".")[0]):
        Config().replace(**{key: value})


def test_beam_cap_is_inclusive():
    assert Config().replace(**{"scanner.beam_count": 1024}).scanner.beam_count == 1024


def test_override_precedence(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"scanner": {"noise_sigma": 0.02, "beam_count": 128}}))
    cfg = load_config(tmp_path / "c.json", {"scanner.noise_sigma": "0.03"})
    assert cfg.scanner.noise_sigma == 0.03  # flag beats file
    assert cfg.scanner.beam_count == 128  # file beats default
    assert cfg.scanner.ping_spacing == Config().scanner.ping_spacing


def test_string_coercions():
    cfg = Config().replace(
        **{
            "evaluator.multi_threshold": "true",
            "evaluator.thresholds": "[0.5, 1]",
            "scene.counts": '{"reef_ring": 3}',
            "templates.rmse_threshold.reef_cone": "0.04",
        }
    )
    assert cfg.evaluator.multi_threshold is True
    assert cfg.evaluator.thresholds == [0.5, 1.0]
    assert cfg.scene.counts == {"reef_ring": 3}
    assert cfg.templates.rmse_threshold["reef_cone"] == 0.04


def test_replace_does_not_mutate():
    base = Config()
    base.replace(**{"scanner.noise_sigma": 0.5})
    assert base.scanner.noise_sigma == Config().scanner.noise_sigma


def test_fingerprint_sections():
    a, b = Config(), Config().replace(**{"evaluator.dist_threshold": 1.0})
    assert a.fingerprint("scanner") == b.fingerprint("scanner")
    assert a.fingerprint() != b.fingerprint()


def test_unknown_class_in_counts():
    with pytest.raises(ConfigError, match="scene.counts.blob"):
        Config().replace(**{"scene.counts": '{"blob": 3}'})

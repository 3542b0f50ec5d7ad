import json

import pytest

from mailpp.agents import CouplingMode
from mailpp.config import ConfigError, DEFAULT_CONFIG_DOC, parse_config


def test_minimal_document_gets_defaults():
    cfg = parse_config("{}")
    assert cfg.encoder.L == 2
    assert cfg.training.lam == 1.0
    assert cfg.training.mode == CouplingMode.BIDIRECTIONAL
    assert cfg.training.temperature == 0.07
    assert cfg.training.betas == (0.9, 0.999)
    assert cfg.precision == "f32"
    assert cfg.seed is None
    assert cfg.training.positions == ("1a", "1b", "2", "3", "4", "5")


def test_round_trip_through_doc():
    from mailpp.config import parse_config_doc

    cfg = parse_config(json.dumps(DEFAULT_CONFIG_DOC))
    assert parse_config_doc(cfg.to_doc()) == cfg


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key 'foo'"):
        parse_config('{"foo": 1}')
    with pytest.raises(ConfigError, match="'lrate'.*'training'"):
        parse_config('{"training": {"lrate": 0.1}}')


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="duplicate key"):
        parse_config('{"seed": 1, "seed": 2}')
    with pytest.raises(ConfigError, match="duplicate key"):
        parse_config('{"training": {"lr": 0.1, "lr": 0.2}}')


def test_invalid_d_m_names_the_key():
    with pytest.raises(ConfigError, match="d_m"):
        parse_config('{"training": {"d_m": -1}}')


def test_syntax_error_reported():
    with pytest.raises(ConfigError, match="not valid JSON"):
        parse_config("{")


def test_type_errors_name_the_key():
    with pytest.raises(ConfigError, match="training.lr"):
        parse_config('{"training": {"lr": "fast"}}')
    with pytest.raises(ConfigError, match="encoder.L"):
        parse_config('{"encoder": {"L": 2.5}}')
    with pytest.raises(ConfigError, match="betas"):
        parse_config('{"training": {"betas": [0.9]}}')


def test_mode_values():
    for mode in CouplingMode:
        cfg = parse_config(json.dumps({"training": {"mode": mode.value}}))
        assert cfg.training.mode == mode
    with pytest.raises(ConfigError, match="training.mode"):
        parse_config('{"training": {"mode": "both_ways"}}')


def test_head_divisibility_checked():
    with pytest.raises(ConfigError, match="divisible"):
        parse_config('{"encoder": {"d_t": 30, "n_heads": 4}}')


def test_rank_bound_per_mode():
    doc = {"encoder": {"d_t": 8, "d_v": 8, "n_heads": 2}, "training": {"rank": 12, "mode": "text_to_image"}}
    with pytest.raises(ConfigError, match="rank"):
        parse_config(json.dumps(doc))
    doc = {"training": {"rank": 20, "d_m": 8, "mode": "bidirectional"}}
    with pytest.raises(ConfigError, match="rank"):
        parse_config(json.dumps(doc))


def test_positions_validation():
    with pytest.raises(ConfigError, match="positions"):
        parse_config('{"training": {"positions": []}}')
    with pytest.raises(ConfigError, match="duplicates"):
        parse_config('{"training": {"positions": ["1a", "1a"]}}')
    with pytest.raises(ConfigError, match="unknown position"):
        parse_config('{"training": {"positions": ["9"]}}')
    cfg = parse_config('{"training": {"positions": ["2", "5"]}}')
    assert cfg.training.positions == ("2", "5")


def test_cross_section_checks():
    with pytest.raises(ConfigError, match="vocab_size"):
        parse_config('{"encoder": {"vocab_size": 10}, "training": {"classes": 16}}')
    with pytest.raises(ConfigError, match="shots"):
        parse_config('{"training": {"shots": 20}, "data": {"pool_per_class": 4}}')
    with pytest.raises(ConfigError, match="text_len"):
        parse_config('{"data": {"text_len": 20}}')
    with pytest.raises(ConfigError, match="bridge_shift"):
        parse_config('{"training": {"mode": "ivlu", "bridge_shift": true}}')
    with pytest.raises(ConfigError, match="classes"):
        parse_config('{"encoder": {"d_v": 8, "n_heads": 1}, "training": {"classes": 12}}')


def test_precision_and_seed_fields():
    cfg = parse_config('{"precision": "f64", "seed": 17, "out_dir": "runs/x"}')
    assert cfg.precision == "f64"
    assert cfg.seed == 17
    assert cfg.out_dir == "runs/x"
    with pytest.raises(ConfigError, match="precision"):
        parse_config('{"precision": "f16"}')
    with pytest.raises(ConfigError, match="seed"):
        parse_config('{"seed": true}')


def test_lambda_key_maps_to_tradeoff():
    cfg = parse_config('{"training": {"lambda": 2.5}}')
    assert cfg.training.lam == 2.5
    with pytest.raises(ConfigError, match="non-negative"):
        parse_config('{"training": {"lambda": -0.5}}')

"""
Tests for strict experiment config parsing
"""

import json
import os
import tempfile

from config_loader import ConfigError, ConfigLoader, parse_config
from testing_utils import main

MINIMAL = '{"data": {"source": "synthetic"}, "mechanism": {"kind": "mnar_logistic"}}'


def _expect_config_error(text, fragment, base_dir='.'):
    try:
        parse_config(text, base_dir)
    except ConfigError as e:
        assert fragment in str(e), str(e)
        return
    raise AssertionError(f"expected ConfigError containing {fragment!r}")


def test_minimal_config_gets_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.get('schedule.T') == 50
    assert cfg.get('schedule.beta_min') == 1e-4 and cfg.get('schedule.beta_max') == 0.5
    assert cfg.get('schedule.kind') == 'quadratic'
    assert cfg.get('em.iterations') == 100 and cfg.get('em.guidance_scale') == 1.0
    assert cfg.get('phase1.artificial_fraction') == 0.1
    assert cfg.get('phase1.artificial_scheme') == 'adjacent'
    assert cfg.get('data.window.window_len') == 24
    assert cfg.get('seed') == 0
    assert 'schedule.T' in cfg.defaults_applied
    assert 'data.source' not in cfg.defaults_applied


def test_missing_required_keys_are_listed():
    _expect_config_error('{"data": {}}', 'data.source')
    _expect_config_error('{"data": {"source": "synthetic"}}', 'mechanism.kind')


def test_unknown_key_is_error():
    _expect_config_error('{"data": {"source": "synthetic"}, "mechanism": {"kind": "mcar"}, "extra": 1}',
                         'Unknown key: extra')
    _expect_config_error('{"data": {"source": "synthetic"}, "mechanism": {"kind": "mcar"}, '
                         '"em": {"iters": 3}}', 'Unknown key: em.iters')


def test_duplicate_key_is_error():
    _expect_config_error('{"data": {"source": "synthetic"}, "mechanism": {"kind": "mcar"}, "seed": 1, "seed": 2}',
                         'Duplicate key: seed')


def test_invalid_json_is_error():
    _expect_config_error('{"data": ', 'Invalid JSON')


def test_invalid_values_are_rejected():
    base = json.loads(MINIMAL)
    cases = [
        ({'seed': -1}, 'seed'),
        ({'seed': 2 ** 64}, 'seed'),
        ({'seed': 1.5}, 'seed'),
        ({'schedule': {'T': 0}}, 'schedule.T'),
        ({'schedule': {'beta_min': 0.6}}, 'beta_min'),
        ({'em': {'iterations': 0}}, 'em'),
        ({'mechanism': {'kind': 'mnar_logistic', 'params': {'q': 0.3}}}, 'mechanism'),
        ({'phase1': {'artificial_scheme': 'blocks'}}, 'phase1.artificial_scheme'),
    ]
    for change, fragment in cases:
        text = json.dumps({**base, **change})
        _expect_config_error(text, fragment)


def test_csv_path_must_exist():
    text = '{"data": {"source": "csv", "csv": {"path": "values.csv"}}, "mechanism": {"kind": "mcar"}}'
    with tempfile.TemporaryDirectory() as tmp:
        _expect_config_error(text, 'data.csv.path', tmp)
        with open(os.path.join(tmp, 'values.csv'), 'w', encoding='utf-8') as f:
            f.write("1,2\n")
        cfg = parse_config(text, tmp)
        assert cfg.resolve_path(cfg.get('data.csv.path')) == os.path.join(tmp, 'values.csv')


def test_round_trip_and_hash():
    cfg = parse_config(MINIMAL)
    again = parse_config(cfg.to_text())
    assert again == cfg
    assert again.config_hash() == cfg.config_hash()
    assert parse_config(MINIMAL).config_hash() == cfg.config_hash()


def test_overrides_change_hash_and_revalidate():
    cfg = parse_config(MINIMAL)
    changed = cfg.with_overrides(**{'seed': 7, 'em.iterations': 3})
    assert changed.get('seed') == 7 and changed.get('em.iterations') == 3
    assert changed.config_hash() != cfg.config_hash()
    assert cfg.get('seed') == 0
    try:
        cfg.with_overrides(**{'em.iterations': 0})
    except ConfigError:
        return
    raise AssertionError("expected ConfigError")


def test_loader_reads_file():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'experiment.json')
        with open(path, 'w', encoding='utf-8') as f:
            f.write(MINIMAL)
        loader = ConfigLoader.__new__(ConfigLoader)
        loader.load_config(path)
        assert loader.get('mechanism.kind') == 'mnar_logistic'
        assert loader.experiment().get('em.mode') == 'hard'
        # read-only: runs record their config in the report, never back to disk
        assert not hasattr(loader, 'save_config') and not hasattr(loader, 'update_value')


TESTS = [
    ("Minimal config defaults", test_minimal_config_gets_defaults),
    ("Missing required keys", test_missing_required_keys_are_listed),
    ("Unknown keys", test_unknown_key_is_error),
    ("Duplicate keys", test_duplicate_key_is_error),
    ("Invalid JSON", test_invalid_json_is_error),
    ("Invalid values", test_invalid_values_are_rejected),
    ("CSV path", test_csv_path_must_exist),
    ("Round trip and hash", test_round_trip_and_hash),
    ("Overrides", test_overrides_change_hash_and_revalidate),
    ("Loader", test_loader_reads_file),
]


if __name__ == '__main__':
    main("CONFIG LOADER", TESTS)

#!/usr/bin/env python3
"""
Tests for configuration loading, overrides and validation.
"""

import json
from pathlib import Path

import pytest

from config_manager import DEFAULT_CONFIG, ConfigManager
from pipeline_errors import ConfigError


def _write(tmp_path, text, name='config.yaml'):
    path = tmp_path / name
    path.write_text(text, encoding='utf-8')
    return str(path)


def test_defaults_are_valid():
    config = ConfigManager()
    assert config.validate_config()
    assert config.get('train.initial_lr') == 0.001
    assert config.get('train.missing', 'fallback') == 'fallback'
    assert config.get_architecture().feature_size == 16
    assert config.get_train_config().effective_lr_step == 70000


def test_shipped_config_matches_defaults():
    config = ConfigManager(str(Path(__file__).parent / 'config.yaml'))
    assert config.config == DEFAULT_CONFIG


def test_file_values_layer_over_defaults(tmp_path):
    config = ConfigManager(_write(tmp_path, "seed: 7\ntrain:\n  total_iters: 2000\n"))
    assert config.get_seed() == 7
    assert config.get('train.total_iters') == 2000
    assert config.get('train.momentum') == 0.9
    train = config.get_train_config()
    assert train.seed == 7 and train.total_iters == 2000


def test_json_config_is_accepted(tmp_path):
    path = _write(tmp_path, json.dumps({'evaluation': {'ap_method': 'blocks'}}), 'config.json')
    assert ConfigManager(path).get_evaluation_config().ap_method == 'blocks'


@pytest.mark.parametrize('text', ["train:\n  learning_rate: 0.1\n", "train: 5\n", "train: [1, 2\n", "- 1\n- 2\n"])
def test_bad_files_raise_config_error(tmp_path, text):
    with pytest.raises(ConfigError):
        ConfigManager(_write(tmp_path, text))


def test_missing_file_raises_config_error(tmp_path):
    with pytest.raises(ConfigError, match='not found'):
        ConfigManager(str(tmp_path / 'absent.yaml'))


def test_overrides_parse_yaml_values():
    config = ConfigManager()
    config.apply_overrides({'train.total_iters': '2000', 'geometry.anchor_scales': '[8, 16, 24]',
                            'train.lr_step': 'null', 'paths.manifest': 'data/eco.jsonl'})
    assert config.get('train.total_iters') == 2000
    assert config.get_geometry_config().anchor_scales == (8.0, 16.0, 24.0)
    assert config.get('train.lr_step') is None
    assert config.get_path('manifest') == 'data/eco.jsonl'


def test_set_rejects_unknown_keys_and_sections():
    config = ConfigManager()
    with pytest.raises(ConfigError):
        config.set('train.nope', 1)
    with pytest.raises(ConfigError):
        config.set('train', 1)
    assert not config.has_key('train.nope')
    assert config.has_key('train.momentum')


def test_stride_must_match_backbone():
    config = ConfigManager()
    config.set('geometry.stride', 16)
    with pytest.raises(ConfigError, match='stride'):
        config.get_geometry_config()
    assert not config.validate_config()


def test_invalid_values_fail_validation():
    config = ConfigManager()
    config.set('train.initial_lr', 0)
    with pytest.raises(ConfigError):
        config.get_train_config()
    assert not config.validate_config()

    config = ConfigManager()
    config.set('evaluation.ap_method', 'coco')
    with pytest.raises(ConfigError):
        config.get_evaluation_config()


def test_missing_required_value_fails_validation():
    config = ConfigManager()
    config.set('train.momentum', None)
    assert not config.validate_config()


def test_loss_and_predict_sections():
    config = ConfigManager()
    loss = config.get_loss_config()
    assert (loss.lambda_, loss.n_cls, loss.n_reg) == (10.0, 256.0, 256.0)
    assert config.get_predict_config() == {'score_threshold': 0.05, 'nms_threshold': 0.3}
    assert config.get_threads() == 1


def test_unset_loss_normalizers_follow_network_and_minibatch():
    config = ConfigManager()
    config.set('architecture.input_size', 64)
    config.set('train.rpn_batch', 128)
    loss = config.get_loss_config()
    assert (loss.n_cls, loss.n_reg) == (128.0, 64.0)

    config.set('loss.n_reg', 100)
    config.set('loss.n_cls', 32)
    loss = config.get_loss_config()
    assert (loss.n_cls, loss.n_reg) == (32.0, 100.0)


def test_train_section_carries_roi_jitter():
    config = ConfigManager()
    assert config.get_train_config().roi_gt_jitter == 8
    config.set('train.roi_gt_jitter', -1)
    with pytest.raises(ConfigError):
        config.get_train_config()

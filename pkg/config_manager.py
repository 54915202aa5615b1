#!/usr/bin/env python3
"""
Configuration Manager
=====================

Handles loading and managing the run configuration from a YAML (or JSON)
file layered over built-in defaults.
"""

import copy
import logging
import os
from typing import Any, Dict, List, Mapping, Optional

import yaml

from box_geometry import GeometryConfig
from detection_evaluator import EvaluationConfig
from detector_network import Architecture, RpnLossConfig
from detector_trainer import TrainConfig
from pipeline_errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_CONFIG: Dict[str, Any] = {
    'paths': {
        'manifest': None,
        'patterns': None,
        'train_manifest': None,
        'test_manifest': None,
        'image_root': None,
        'output_dir': 'runs',
        'checkpoint': None,
        'predictions': None,
    },
    'seed': 0,
    'threads': 1,
    'architecture': {
        'input_size': 128,
        'conv_channels': [8, 16, 32],
        'rpn_channels': 32,
        'roi_size': 4,
    },
    'geometry': {
        'anchor_scales': [32, 64, 128],
        'anchor_ratios': [0.5, 1, 2],
        'stride': 8,
        'positive_iou': 0.7,
        'negative_iou': 0.3,
        'proposal_nms': 0.7,
        'top_n': 300,
        'pre_nms_top_n': 1000,
    },
    'loss': {
        'lambda': 10.0,
        'n_cls': None,
        'n_reg': None,
    },
    'train': {
        'initial_lr': 0.001,
        'momentum': 0.9,
        'weight_decay': 0.0005,
        'total_iters': 100000,
        'lr_step': None,
        'step_factor': 0.1,
        'rpn_batch': 256,
        'positive_fraction': 0.5,
        'roi_batch': 32,
        'roi_positive_fraction': 0.25,
        'roi_fg_iou': 0.5,
        'roi_gt_jitter': 8,
        'log_every': 20,
    },
    'predict': {
        'score_threshold': 0.05,
        'nms_threshold': 0.3,
    },
    'evaluation': {
        'iou_threshold': 0.5,
        'ap_method': 'voc2010',
        'blocks': 10,
        'operating_score': 0.5,
    },
}


def _deep_merge(base: Dict[str, Any], update: Mapping[str, Any], prefix: str = '') -> Dict[str, Any]:
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration key '{dotted}'")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"'{dotted}' must be a mapping")
            _deep_merge(base[key], value, f"{dotted}.")
        else:
            base[key] = value
    return base


class ConfigManager:
    """Manages run configuration"""

    def __init__(self, config_file: Optional[str] = None):
        self.config_file = config_file
        self.config: Dict[str, Any] = copy.deepcopy(DEFAULT_CONFIG)
        if config_file:
            self.load_config()

    def load_config(self) -> None:
        """Load configuration from YAML/JSON file and merge it over the defaults"""
        try:
            if not os.path.exists(self.config_file):
                raise FileNotFoundError(f"Configuration file {self.config_file} not found")

            with open(self.config_file, 'r', encoding='utf-8') as f:
                loaded = yaml.safe_load(f) or {}

            if not isinstance(loaded, dict):
                raise ConfigError(f"{self.config_file} must hold a mapping at the top level")
            _deep_merge(self.config, loaded)
            logger.info(f"Configuration loaded from {self.config_file}")

        except FileNotFoundError as e:
            logger.error(f"Failed to load configuration: {e}")
            raise ConfigError(str(e))
        except yaml.YAMLError as e:
            logger.error(f"Failed to load configuration: {e}")
            raise ConfigError(f"malformed configuration file {self.config_file}: {e}")

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value by key (supports dot notation)"""
        keys = key.split('.')
        value = self.config

        try:
            for k in keys:
                value = value[k]
            return value
        except (KeyError, TypeError):
            return default

    def has_key(self, key: str) -> bool:
        node = self.config
        for k in key.split('.'):
            if not isinstance(node, dict) or k not in node:
                return False
            node = node[k]
        return True

    def set(self, key: str, value: Any) -> None:
        """Set a leaf value by dotted key; unknown keys are rejected"""
        if not self.has_key(key):
            raise ConfigError(f"unknown configuration key '{key}'")
        *parents, leaf = key.split('.')
        node = self.config
        for k in parents:
            node = node[k]
        if isinstance(node[leaf], dict):
            raise ConfigError(f"'{key}' is a section, not a value")
        node[leaf] = value

    def apply_overrides(self, overrides: Mapping[str, Any]) -> None:
        """Apply {dotted_key: value} overrides; string values are parsed as YAML scalars/lists"""
        for key, raw in overrides.items():
            if isinstance(raw, str):
                try:
                    value = yaml.safe_load(raw)
                except yaml.YAMLError as e:
                    raise ConfigError(f"cannot parse value for '{key}': {e}")
            else:
                value = raw
            self.set(key, value)
            logger.debug(f"Override {key} = {value!r}")

    def _build(self, section: str, factory):
        try:
            return factory()
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid '{section}' configuration: {e}")

    def get_seed(self) -> int:
        """Get global seed"""
        return self._build('seed', lambda: int(self.get('seed', 0)))

    def get_threads(self) -> int:
        """Get worker thread count"""
        return self._build('threads', lambda: max(1, int(self.get('threads', 1))))

    def get_path(self, name: str) -> Optional[str]:
        return self.get(f'paths.{name}')

    def get_architecture(self) -> Architecture:
        return self._build('architecture', lambda: Architecture.from_dict(self.get('architecture', {})))

    def get_geometry_config(self) -> GeometryConfig:
        geometry = self.get('geometry', {})
        if int(geometry.get('stride', 8)) != self.get_architecture().stride:
            raise ConfigError("geometry.stride must match the backbone stride (8)")
        return self._build('geometry', lambda: GeometryConfig.from_dict(geometry))

    def get_loss_config(self) -> RpnLossConfig:
        loss = self.get('loss', {})
        rpn_batch = self.get('train.rpn_batch', 256)
        return self._build('loss', lambda: RpnLossConfig.for_architecture(
            self.get_architecture(), int(rpn_batch), float(loss['lambda']), loss.get('n_cls'), loss.get('n_reg')))

    def get_train_config(self) -> TrainConfig:
        return self._build('train', lambda: TrainConfig.from_dict(dict(self.get('train', {}),
                                                                       seed=self.get_seed())))

    def get_evaluation_config(self) -> EvaluationConfig:
        return self._build('evaluation', lambda: EvaluationConfig(**self.get('evaluation', {})))

    def get_predict_config(self) -> Dict[str, float]:
        predict = self.get('predict', {})
        return self._build('predict', lambda: {k: float(v) for k, v in predict.items()})

    def validate_config(self) -> bool:
        """Validate required configuration values"""
        required_keys = [
            'seed',
            'train.initial_lr',
            'train.momentum',
            'train.weight_decay',
            'train.total_iters',
            'geometry.anchor_scales',
            'geometry.anchor_ratios',
            'evaluation.iou_threshold',
        ]

        missing_keys = [key for key in required_keys if self.get(key) is None]
        if missing_keys:
            logger.error(f"Missing required configuration keys: {missing_keys}")
            return False

        problems: List[str] = []
        for builder in (self.get_train_config, self.get_geometry_config, self.get_loss_config,
                        self.get_architecture, self.get_evaluation_config):
            try:
                builder()
            except (ConfigError, KeyError, TypeError, ValueError) as e:
                problems.append(f"{builder.__name__}: {e}")

        if problems:
            logger.error(f"Invalid configuration: {problems}")
            return False

        return True

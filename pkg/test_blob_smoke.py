#!/usr/bin/env python3
"""
End-to-end smoke run on the coloured-blob dataset: 3 species, 100 train /
50 test images at 128x128, 6000 iterations with the default optimizer
(lr 0.001, momentum 0.9, weight decay 0.0005). Takes a few minutes
single-threaded.

Marked slow; run with ``pytest -m slow``.
"""

import numpy as np
import pytest

from detection_evaluator import evaluate
from detector_network import Architecture
from detector_trainer import TrainConfig, predict, train
from synthetic_data import generate_blob_dataset

SMOKE_ITERS = 6000


@pytest.mark.slow
def test_blob_detector_learns(tmp_path):
    train_set, test_set = generate_blob_dataset(tmp_path, n_train=100, n_test=50, seed=0, species=3, size=128)
    config = TrainConfig(total_iters=SMOKE_ITERS, seed=0)
    checkpoint, history = train(train_set, config, image_root=tmp_path, architecture=Architecture())
    assert checkpoint.loss_config.n_reg == Architecture().feature_size ** 2

    initial = np.mean([r.total for r in history[:20]])
    final = np.mean([r.total for r in history[-100:]])
    assert final < 0.1 * initial

    result = predict(checkpoint, test_set, score_threshold=0.05, image_root=tmp_path)
    report = evaluate(result, test_set)
    assert report.map >= 0.90

    two_object = test_set.records[0]
    assert len(two_object.boxes) == 2
    assert len(result.for_image(two_object.image_id)) >= 2

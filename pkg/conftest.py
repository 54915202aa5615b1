"""Shared fixtures for the pipeline tests."""

import json
from pathlib import Path
from typing import Callable, List

import numpy as np
import pytest

from dataset_manager import AnnotatedImage, BoundingBox, DatasetManifest, ImageKind, SpeciesBox
from detector_network import Architecture
from image_codec import RasterImage, write_ppm


def eco_record(image_id: str, species: List[str], width: int = 32, height: int = 32,
               path: str = '') -> AnnotatedImage:
    boxes = tuple(SpeciesBox(s, BoundingBox(1 + i, 1 + i, width - 1, height - 1)) for i, s in enumerate(species))
    return AnnotatedImage(image_id, path or f"{image_id}.ppm", ImageKind.ECOLOGICAL, width, height, boxes)


def pattern_record(image_id: str, species: str, size: int = 16) -> AnnotatedImage:
    return AnnotatedImage(image_id, f"{image_id}.ppm", ImageKind.PATTERN, size, size,
                          (SpeciesBox(species, BoundingBox(0, 0, size, size)),))


@pytest.fixture
def make_eco_record() -> Callable[..., AnnotatedImage]:
    return eco_record


@pytest.fixture
def make_pattern_record() -> Callable[..., AnnotatedImage]:
    return pattern_record


@pytest.fixture
def write_jsonl(tmp_path: Path) -> Callable[[List[dict], str], Path]:
    def _write(rows: List[dict], name: str = 'manifest.jsonl') -> Path:
        path = tmp_path / name
        with open(path, 'w', encoding='utf-8') as f:
            for row in rows:
                f.write((row if isinstance(row, str) else json.dumps(row)) + '\n')
        return path
    return _write


@pytest.fixture
def random_image() -> Callable[..., RasterImage]:
    def _make(width: int = 8, height: int = 6, seed: int = 0) -> RasterImage:
        rng = np.random.default_rng(seed)
        return RasterImage.from_array(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))
    return _make


@pytest.fixture
def image_dir(tmp_path: Path, random_image) -> Callable[[DatasetManifest], Path]:
    """Write a random PPM for every record of a manifest and return the image root."""
    def _write(manifest: DatasetManifest) -> Path:
        root = tmp_path / 'images'
        for i, record in enumerate(manifest.records):
            write_ppm(root / record.path, random_image(record.width, record.height, seed=i))
        return root
    return _write


@pytest.fixture
def tiny_architecture() -> Architecture:
    """32x32 input, a 4x4 feature map and under a thousand parameters."""
    return Architecture(input_size=32, conv_channels=(2, 4, 4), rpn_channels=4, roi_size=4)

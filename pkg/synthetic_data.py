#!/usr/bin/env python3
"""
Synthetic Data
==============

Generators for data the pipeline can run on without the real photo
collection:

- a coloured-blob detection dataset (one colour per "species") with
  PPM images and train/test manifests
- count-only manifests reproducing the long-tail species counts of the
  ecological and pattern photo collections, for the counting identities
  of singleton removal, splitting, training-set construction and
  amplification
"""

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from dataset_manager import (AnnotatedImage, BoundingBox, DatasetManifest, ImageKind, SpeciesBox,
                             write_manifest)
from image_codec import RasterImage, write_ppm

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

BLOB_COLOURS: Tuple[Tuple[int, int, int], ...] = (
    (220, 40, 40),
    (40, 200, 60),
    (50, 70, 230),
    (230, 200, 30),
    (200, 60, 210),
    (30, 210, 210),
)


# ---------------------------------------------------------------------------
# Coloured-blob dataset
# ---------------------------------------------------------------------------

def species_names(count: int) -> List[str]:
    return [f"species_{chr(ord('a') + i)}" if i < 26 else f"species_{i:03d}" for i in range(count)]


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Dim greyish texture: a coarse random grid upsampled plus fine noise."""
    coarse = rng.integers(60, 110, size=(size // 8 + 1, size // 8 + 1, 1))
    base = np.repeat(np.repeat(coarse, 8, axis=0), 8, axis=1)[:size, :size]
    fine = rng.normal(0.0, 6.0, size=(size, size, 3))
    return np.clip(base + fine, 0, 255)


def _draw_blob(canvas: np.ndarray, colour: Sequence[int], cx: float, cy: float,
               rx: float, ry: float) -> BoundingBox:
    size = canvas.shape[0]
    ys, xs = np.mgrid[0:size, 0:size]
    mask = ((xs + 0.5 - cx) / rx) ** 2 + ((ys + 0.5 - cy) / ry) ** 2 <= 1.0
    canvas[mask] = colour
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BoundingBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def _blob_image(rng: np.random.Generator, size: int, classes: Sequence[int],
                colours: Sequence[Sequence[int]]) -> Tuple[np.ndarray, List[Tuple[int, BoundingBox]]]:
    canvas = _background(rng, size)
    placed = []
    # Two objects go to opposite halves so they never overlap.
    single = len(classes) == 1
    slots = [(0.0, 1.0)] if single else [(0.0, 0.5), (0.5, 1.0)]
    for cls, (lo, hi) in zip(classes, slots):
        rx = rng.uniform(0.12, 0.25) * size if single else rng.uniform(0.22, 0.32) * (hi - lo) * size
        ry = rng.uniform(0.12, 0.22) * size
        cx = rng.uniform(lo * size + rx + 1, hi * size - rx - 1)
        cy = rng.uniform(ry + 1, size - ry - 1)
        placed.append((cls, _draw_blob(canvas, colours[cls], cx, cy, rx, ry)))
    return canvas, placed


def generate_blob_dataset(output_dir: PathLike, n_train: int = 100, n_test: int = 50, seed: int = 0,
                          species: int = 3, size: int = 128,
                          two_object_fraction: float = 0.2) -> Tuple[DatasetManifest, DatasetManifest]:
    """Write blob images under output_dir/images plus train.jsonl and test.jsonl.

    Every test split with at least one image gets a two-object image, so
    multi-object detection is always exercised.
    """
    if not 1 <= species <= len(BLOB_COLOURS):
        raise ValueError(f"species must be between 1 and {len(BLOB_COLOURS)}")
    output_dir = Path(output_dir)
    rng = np.random.default_rng(seed)
    names = species_names(species)

    manifests = []
    for split, count in (('train', n_train), ('test', n_test)):
        records = []
        for i in range(count):
            two = rng.random() < two_object_fraction or (split == 'test' and i == 0)
            classes = list(rng.integers(0, species, size=2 if two else 1))
            pixels, placed = _blob_image(rng, size, classes, BLOB_COLOURS)
            image_id = f"{split}_{i:04d}"
            path = f"images/{image_id}.ppm"
            write_ppm(output_dir / path, RasterImage.from_array(pixels))
            records.append(AnnotatedImage(
                image_id=image_id,
                path=path,
                kind=ImageKind.ECOLOGICAL,
                width=size,
                height=size,
                boxes=tuple(SpeciesBox(names[c], box) for c, box in placed),
            ))
        manifest = DatasetManifest(tuple(records), label=f"blobs_{split}", seed=seed,
                                   metadata={'generator': 'blobs', 'species': names})
        write_manifest(manifest, output_dir / f"{split}.jsonl")
        manifests.append(manifest)

    logger.info(f"✅ Generated {n_train} train / {n_test} test blob images in {output_dir}")
    return manifests[0], manifests[1]


# ---------------------------------------------------------------------------
# Count-only manifests
# ---------------------------------------------------------------------------

def long_tail_eco_counts() -> Dict[str, int]:
    """111 species over 1425 ecological photos, 17 of them seen once.

    Without the singletons: 94 species, 1408 photos, 34 odd counts, and the
    most common species holds 121 photos.
    """
    counts = [121] + [3] * 33 + [20] * 54 + [18] * 6 + [1] * 17
    return {f"eco_{i:03d}": n for i, n in enumerate(counts)}


def long_tail_pattern_counts(eco_species: Sequence[str], matched: int = 585,
                             total: int = 4270, other_species: int = 200) -> Dict[str, int]:
    """Pattern-photo counts: ``matched`` photos spread over eco_species, the rest elsewhere."""
    counts: Dict[str, int] = {}
    for pool, n, prefix in ((list(eco_species), matched, None), (other_species, total - matched, 'pat')):
        names = pool if prefix is None else [f"{prefix}_{i:03d}" for i in range(pool)]
        base, extra = divmod(n, len(names))
        for i, name in enumerate(names):
            counts[name] = counts.get(name, 0) + base + (1 if i < extra else 0)
    return counts


def count_manifest(counts: Mapping[str, int], kind: ImageKind = ImageKind.ECOLOGICAL, size: int = 8,
                   label: str = '', prefix: Optional[str] = None) -> DatasetManifest:
    """One single-species record per counted photo; pattern records carry the full-image box."""
    prefix = prefix if prefix is not None else kind.value[:3]
    box = BoundingBox(0, 0, size, size) if kind is ImageKind.PATTERN else BoundingBox(1, 1, size - 1, size - 1)
    records = []
    for species in counts:
        for j in range(counts[species]):
            image_id = f"{prefix}_{species}_{j:03d}"
            records.append(AnnotatedImage(image_id, f"{image_id}.ppm", kind, size, size,
                                          (SpeciesBox(species, box),)))
    return DatasetManifest(tuple(records), label=label)


def write_count_images(manifest: DatasetManifest, image_root: PathLike, seed: int = 0) -> None:
    """Write a small random PPM for every record so the manifest can be amplified."""
    image_root = Path(image_root)
    rng = np.random.default_rng(seed)
    for record in manifest.records:
        pixels = rng.integers(0, 256, size=(record.height, record.width, 3), dtype=np.uint8)
        write_ppm(image_root / record.path, RasterImage.from_array(pixels))

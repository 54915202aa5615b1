#!/usr/bin/env python3
"""
Augmentation Engine
===================

Amplifies a training manifest tenfold: every image is kept and joined by
nine deterministic variants (two flips, three right-angle rotations,
Gaussian noise, Gaussian blur, contrast up and contrast down). Boxes are
transformed exactly alongside the pixels.

Noise is drawn from a counter-based SplitMix64 stream turned into normal
deviates with Box-Muller, so variant bytes depend only on the seed and
the image_id.
"""

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from dataset_manager import AnnotatedImage, BoundingBox, DatasetManifest, SpeciesBox
from image_codec import RasterImage, load_image, write_ppm
from pipeline_errors import ImageIOError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

NOISE_SIGMA = 10.0
CONTRAST_UP = 1.25
CONTRAST_DOWN = 0.8
BLUR_KERNEL = np.outer([1, 2, 1], [1, 2, 1])  # sums to 16

_MASK64 = (1 << 64) - 1
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class AugKind(str, Enum):
    VFLIP = "VFlip"
    HFLIP = "HFlip"
    ROT90 = "Rot90"
    ROT180 = "Rot180"
    ROT270 = "Rot270"
    GAUSS_NOISE = "GaussNoise"
    GAUSS_BLUR = "GaussBlur"
    CONTRAST_UP = "ContrastUp"
    CONTRAST_DOWN = "ContrastDown"

    @property
    def is_geometric(self) -> bool:
        return self in GEOMETRIC_KINDS


GEOMETRIC_KINDS = frozenset({AugKind.VFLIP, AugKind.HFLIP, AugKind.ROT90, AugKind.ROT180, AugKind.ROT270})


class SplitMix64:
    """Counter-based SplitMix64 stream with Box-Muller normal deviates."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self.counter = 0

    def next_uint64(self, n: int) -> np.ndarray:
        with np.errstate(over='ignore'):
            steps = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
            z = np.full(n, self.seed, dtype=np.uint64) + steps * _GAMMA
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            z = z ^ (z >> np.uint64(31))
        self.counter += n
        return z

    def uniform(self, n: int) -> np.ndarray:
        """Uniform doubles in [0, 1) from the top 53 bits."""
        return (self.next_uint64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u1 = 1.0 - self.uniform(pairs)  # (0, 1]
        u2 = self.uniform(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * math.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n]


def derive_seed(seed: int, image_id: str) -> int:
    """Per-record seed: 64-bit BLAKE2b digest of (seed, image_id)."""
    digest = hashlib.blake2b(f"{seed}:{image_id}".encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'little')


# ---------------------------------------------------------------------------
# Single-image transforms
# ---------------------------------------------------------------------------

def _transform_box(box: BoundingBox, kind: AugKind, width: int, height: int) -> BoundingBox:
    x0, y0, x1, y1 = box.as_tuple()
    if kind is AugKind.VFLIP:
        return BoundingBox(x0, height - y1, x1, height - y0)
    if kind is AugKind.HFLIP:
        return BoundingBox(width - x1, y0, width - x0, y1)
    if kind is AugKind.ROT90:
        return BoundingBox(height - y1, x0, height - y0, x1)
    if kind is AugKind.ROT180:
        return BoundingBox(width - x1, height - y1, width - x0, height - y0)
    if kind is AugKind.ROT270:
        return BoundingBox(y0, width - x1, y1, width - x0)
    return box


def _transform_pixels(pixels: np.ndarray, kind: AugKind, seed: int) -> np.ndarray:
    if kind is AugKind.VFLIP:
        return pixels[::-1, :, :]
    if kind is AugKind.HFLIP:
        return pixels[:, ::-1, :]
    if kind is AugKind.ROT90:
        return np.rot90(pixels, k=-1, axes=(0, 1))  # clockwise
    if kind is AugKind.ROT180:
        return np.rot90(pixels, k=2, axes=(0, 1))
    if kind is AugKind.ROT270:
        return np.rot90(pixels, k=1, axes=(0, 1))
    if kind is AugKind.GAUSS_NOISE:
        noise = SplitMix64(seed).normal(pixels.size).reshape(pixels.shape)
        return np.clip(np.rint(pixels.astype(np.float64) + NOISE_SIGMA * noise), 0, 255)
    if kind is AugKind.GAUSS_BLUR:
        height, width = pixels.shape[:2]
        padded = np.pad(pixels.astype(np.int64), ((1, 1), (1, 1), (0, 0)), mode='edge')
        acc = np.zeros(pixels.shape, dtype=np.int64)
        for dy in range(3):
            for dx in range(3):
                acc += BLUR_KERNEL[dy, dx] * padded[dy:dy + height, dx:dx + width, :]
        return (acc + 8) // 16
    if kind is AugKind.CONTRAST_UP:
        return np.clip(np.rint(128.0 + CONTRAST_UP * (pixels.astype(np.float64) - 128.0)), 0, 255)
    if kind is AugKind.CONTRAST_DOWN:
        return np.clip(np.rint(128.0 + CONTRAST_DOWN * (pixels.astype(np.float64) - 128.0)), 0, 255)
    raise ValueError(f"unknown augmentation {kind!r}")


def apply(image: RasterImage, boxes: Sequence[BoundingBox], kind: Union[AugKind, str],
          seed: int = 0) -> Tuple[RasterImage, List[BoundingBox]]:
    """Apply one augmentation to an image and its boxes.

    Geometric kinds move boxes with the pixels (Rot90/Rot270 swap width and
    height); photometric kinds return the boxes unchanged.
    """
    kind = AugKind(kind)
    pixels = _transform_pixels(image.pixels, kind, seed)
    out = RasterImage.from_array(pixels)
    if not kind.is_geometric:
        return out, list(boxes)
    return out, [_transform_box(b, kind, image.width, image.height) for b in boxes]


# ---------------------------------------------------------------------------
# Manifest amplification
# ---------------------------------------------------------------------------

def _file_name(image_id: str) -> str:
    return image_id.replace('/', '_').replace('\\', '_') + '.ppm'


def _amplify_record(record: AnnotatedImage, image_root: Path, output_dir: Path,
                    seed: int) -> List[AnnotatedImage]:
    source = image_root / record.path
    try:
        image = load_image(source)
    except ImageIOError as e:
        raise ImageIOError(f"record '{record.image_id}': {e}", str(source))
    if (image.width, image.height) != (record.width, record.height):
        raise ImageIOError(f"record '{record.image_id}': image is {image.width}x{image.height}, "
                           f"manifest says {record.width}x{record.height}", str(source))

    record_seed = derive_seed(seed, record.image_id)
    name = _file_name(record.image_id)
    write_ppm(output_dir / name, image)
    out = [AnnotatedImage(record.image_id, name, record.kind, record.width, record.height, record.boxes)]

    species = [sb.species for sb in record.boxes]
    for kind in AugKind:
        variant, boxes = apply(image, [sb.box for sb in record.boxes], kind, record_seed)
        variant_id = f"{record.image_id}__{kind.value}"
        variant_name = _file_name(variant_id)
        write_ppm(output_dir / variant_name, variant)
        out.append(AnnotatedImage(
            image_id=variant_id,
            path=variant_name,
            kind=record.kind,
            width=variant.width,
            height=variant.height,
            boxes=tuple(SpeciesBox(s, b) for s, b in zip(species, boxes)),
        ))
    return out


def amplify(manifest: DatasetManifest, output_dir: PathLike, seed: int,
            image_root: Optional[PathLike] = None, threads: int = 1) -> DatasetManifest:
    """Write each image plus its nine variants under output_dir.

    The returned manifest holds 10 x |manifest| records sorted by image_id,
    with paths relative to output_dir.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    image_root = Path(image_root) if image_root is not None else Path('.')

    logger.info(f"🔄 Amplifying {len(manifest):,} records into {output_dir} ({threads} thread(s))")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            batches = list(pool.map(lambda r: _amplify_record(r, image_root, output_dir, seed), manifest.records))
    else:
        batches = [_amplify_record(r, image_root, output_dir, seed) for r in manifest.records]

    records = sorted((r for batch in batches for r in batch), key=lambda r: r.image_id)
    metadata = dict(manifest.metadata, augment_seed=seed, augment_source=manifest.label)
    logger.info(f"✅ Amplified {len(manifest):,} -> {len(records):,} records")
    return DatasetManifest(tuple(records), label=manifest.label, seed=seed, metadata=metadata)

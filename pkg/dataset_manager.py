#!/usr/bin/env python3
"""
Dataset Manager
===============

Loads, validates and transforms annotated butterfly datasets: species
histograms, singleton-species removal, the stratified 5-5 split and the
two training-set construction strategies (all pattern photos, or only the
pattern photos matching the ecological species).

Manifests are UTF-8 JSON-lines files, one AnnotatedImage per line:

    {"image_id": "...", "path": "...", "kind": "ecological",
     "width": 640, "height": 480,
     "boxes": [{"species": "...", "x_min": 0, "y_min": 0, "x_max": 10, "y_max": 10}]}

Label, seed and provenance metadata live in a ``<manifest>.meta.json``
sidecar.
"""

import csv
import json
import logging
import math
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from pipeline_errors import ManifestError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class ImageKind(str, Enum):
    """Photo kind: ecological (in habitat) or pattern (specimen plate)."""

    ECOLOGICAL = "ecological"
    PATTERN = "pattern"


class TrainingStrategy(str, Enum):
    """How pattern photos join the ecological training half."""

    ALL_PATTERNS = "AllPatterns"
    MATCHED_PATTERNS = "MatchedPatterns"

    @property
    def label(self) -> str:
        return "Data_1" if self is TrainingStrategy.ALL_PATTERNS else "Data_2"


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, inclusive-exclusive: x_max/y_max are one past the last pixel.

    Manifest boxes are integral; detector outputs may carry continuous values.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def is_valid_for(self, width: int, height: int) -> bool:
        return 0 <= self.x_min < self.x_max <= width and 0 <= self.y_min < self.y_max <= height


class SpeciesBox(NamedTuple):
    species: str
    box: BoundingBox


@dataclass(frozen=True)
class AnnotatedImage:
    """One photo with its species-labelled boxes."""

    image_id: str
    path: str
    kind: ImageKind
    width: int
    height: int
    boxes: Tuple[SpeciesBox, ...]

    @property
    def species(self) -> Tuple[str, ...]:
        """Distinct species in first-listed order."""
        return tuple(dict.fromkeys(sb.species for sb in self.boxes))

    @property
    def primary_species(self) -> str:
        return self.boxes[0].species

    def to_dict(self) -> Dict[str, Any]:
        return {
            'image_id': self.image_id,
            'path': self.path,
            'kind': self.kind.value,
            'width': self.width,
            'height': self.height,
            'boxes': [
                {
                    'species': sb.species,
                    'x_min': sb.box.x_min,
                    'y_min': sb.box.y_min,
                    'x_max': sb.box.x_max,
                    'y_max': sb.box.y_max,
                }
                for sb in self.boxes
            ],
        }


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered collection of records plus provenance."""

    records: Tuple[AnnotatedImage, ...]
    label: str = ""
    seed: int = 0
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def species_set(self) -> set:
        return {sb.species for record in self.records for sb in record.boxes}


@dataclass(frozen=True)
class SpeciesHistogram:
    """species -> per-image occurrence count, descending by count then species."""

    entries: Tuple[Tuple[str, int], ...]

    def as_dict(self) -> Dict[str, int]:
        return dict(self.entries)

    @property
    def total(self) -> int:
        return sum(count for _, count in self.entries)

    def singletons(self) -> List[str]:
        return [species for species, count in self.entries if count == 1]


# ---------------------------------------------------------------------------
# Parsing and validation
# ---------------------------------------------------------------------------

def _require_int(value: Any, name: str, image_id: Optional[str], line: Optional[int]) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ManifestError(f"field '{name}' must be an integer, got {value!r}", image_id, line)
    return int(value)


def _parse_box(raw: Dict[str, Any], image_id: str, line: Optional[int]) -> SpeciesBox:
    try:
        species = raw['species']
    except (KeyError, TypeError):
        raise ManifestError("box without 'species'", image_id, line)
    coords = []
    for name in ('x_min', 'y_min', 'x_max', 'y_max'):
        if name not in raw:
            raise ManifestError(f"box missing '{name}'", image_id, line)
        coords.append(_require_int(raw[name], name, image_id, line))
    return SpeciesBox(str(species), BoundingBox(*coords))


def parse_record(raw: Dict[str, Any], line: Optional[int] = None) -> AnnotatedImage:
    """Build an AnnotatedImage from a decoded JSON object and validate it.

    Pattern records without boxes get the full-image box, labelled with the
    record-level ``species`` field.
    """
    if not isinstance(raw, dict):
        raise ManifestError("record is not a JSON object", None, line)
    image_id = raw.get('image_id')
    if not isinstance(image_id, str) or not image_id:
        raise ManifestError("missing or empty 'image_id'", None, line)

    try:
        kind = ImageKind(raw.get('kind'))
    except ValueError:
        raise ManifestError(f"unknown kind {raw.get('kind')!r}", image_id, line)

    width = _require_int(raw.get('width'), 'width', image_id, line)
    height = _require_int(raw.get('height'), 'height', image_id, line)
    if width <= 0 or height <= 0:
        raise ManifestError(f"non-positive image size {width}x{height}", image_id, line)

    raw_boxes = raw.get('boxes') or []
    if not isinstance(raw_boxes, list):
        raise ManifestError("'boxes' must be a list", image_id, line)
    boxes = [_parse_box(b, image_id, line) for b in raw_boxes]

    if kind is ImageKind.PATTERN and not boxes:
        species = raw.get('species')
        if not species:
            raise ManifestError("pattern record has neither boxes nor 'species'", image_id, line)
        boxes = [SpeciesBox(str(species), BoundingBox(0, 0, width, height))]

    record = AnnotatedImage(
        image_id=image_id,
        path=str(raw.get('path', '')),
        kind=kind,
        width=width,
        height=height,
        boxes=tuple(boxes),
    )
    validate_record(record, line)
    return record


def validate_record(record: AnnotatedImage, line: Optional[int] = None) -> None:
    """Check the AnnotatedImage invariants, raising ManifestError on violation."""
    if not record.boxes:
        raise ManifestError("ecological record has no boxes", record.image_id, line)
    for sb in record.boxes:
        if not sb.box.is_valid_for(record.width, record.height):
            raise ManifestError(
                f"box {sb.box.as_tuple()} invalid for {record.width}x{record.height} image",
                record.image_id, line,
            )
    if record.kind is ImageKind.PATTERN:
        full = BoundingBox(0, 0, record.width, record.height)
        if len(record.boxes) != 1 or record.boxes[0].box != full:
            raise ManifestError("pattern record must hold exactly one full-image box", record.image_id, line)


def _check_unique_ids(records: Iterable[AnnotatedImage]) -> None:
    seen = set()
    for record in records:
        if record.image_id in seen:
            raise ManifestError("duplicate image_id", record.image_id)
        seen.add(record.image_id)


def _meta_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + '.meta.json')


def load_manifest(path: PathLike) -> DatasetManifest:
    """Read and validate a JSON-lines manifest (plus its sidecar, if any)."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} not found")

    records: List[AnnotatedImage] = []
    seen: Dict[str, int] = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"JSON parse error: {e.msg}", None, line_no)
            record = parse_record(raw, line_no)
            if record.image_id in seen:
                raise ManifestError(f"duplicate image_id (first seen on line {seen[record.image_id]})",
                                    record.image_id, line_no)
            seen[record.image_id] = line_no
            records.append(record)

    label, seed, metadata = path.stem, 0, {}
    meta_file = _meta_path(path)
    if meta_file.exists():
        with open(meta_file, 'r', encoding='utf-8') as f:
            meta = json.load(f)
        label = meta.get('label', label)
        seed = int(meta.get('seed', seed))
        metadata = meta.get('metadata', {})

    logger.info(f"✅ Loaded {len(records):,} records from {path}")
    return DatasetManifest(tuple(records), label=label, seed=seed, metadata=metadata)


def write_manifest(manifest: DatasetManifest, path: PathLike) -> Path:
    """Write records as JSON-lines in manifest order, plus the metadata sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for record in manifest.records:
            f.write(json.dumps(record.to_dict(), ensure_ascii=False, sort_keys=True))
            f.write('\n')
    with open(_meta_path(path), 'w', encoding='utf-8') as f:
        json.dump({'label': manifest.label, 'seed': manifest.seed, 'metadata': manifest.metadata},
                  f, ensure_ascii=False, sort_keys=True, indent=2)
    logger.info(f"✅ Wrote {len(manifest):,} records to {path}")
    return path


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def species_histogram(manifest: DatasetManifest) -> SpeciesHistogram:
    """Count one occurrence per (image, species) pair, sorted by descending count."""
    counts: Counter = Counter()
    for record in manifest.records:
        counts.update(record.species)
    entries = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return SpeciesHistogram(tuple(entries))


def write_histogram_csv(histogram: SpeciesHistogram, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['species', 'count'])
        writer.writerows(histogram.entries)
    return path


def dataset_summary(manifest: DatasetManifest) -> Dict[str, Any]:
    """Composition and long-tail statistics of a manifest."""
    histogram = species_histogram(manifest)
    counts = [count for _, count in histogram.entries]
    kinds = Counter(record.kind.value for record in manifest.records)
    return {
        'images': len(manifest),
        'ecological': kinds.get(ImageKind.ECOLOGICAL.value, 0),
        'pattern': kinds.get(ImageKind.PATTERN.value, 0),
        'boxes': sum(len(record.boxes) for record in manifest.records),
        'species': len(counts),
        'singleton_species': len(histogram.singletons()),
        'min_count': min(counts) if counts else 0,
        'median_count': statistics.median(counts) if counts else 0,
        'max_count': max(counts) if counts else 0,
    }


# ---------------------------------------------------------------------------
# Transformations
# ---------------------------------------------------------------------------

def remove_singletons(manifest: DatasetManifest) -> DatasetManifest:
    """Drop species that occur in a single image.

    Records holding only singleton species are removed; records mixing them
    with other species keep only the boxes of the surviving species.
    """
    singletons = set(species_histogram(manifest).singletons())
    if not singletons:
        return manifest

    kept: List[AnnotatedImage] = []
    for record in manifest.records:
        boxes = tuple(sb for sb in record.boxes if sb.species not in singletons)
        if not boxes:
            continue
        kept.append(record if len(boxes) == len(record.boxes) else replace(record, boxes=boxes))

    logger.info(f"📊 Removed {len(singletons)} singleton species, "
                f"{len(manifest) - len(kept)} images dropped, {len(kept)} kept")
    metadata = dict(manifest.metadata, singletons_removed=sorted(singletons))
    return DatasetManifest(tuple(kept), label=manifest.label, seed=manifest.seed, metadata=metadata)


def split_stratified(manifest: DatasetManifest, seed: int) -> Tuple[DatasetManifest, DatasetManifest]:
    """Per-species 5-5 split: ceil(n/2) images to train, floor(n/2) to test.

    Images are grouped by their first-listed species; the within-species
    order is a seeded shuffle. Output records keep the input order.
    """
    groups: Dict[str, List[int]] = defaultdict(list)
    for index, record in enumerate(manifest.records):
        groups[record.primary_species].append(index)

    rng = np.random.default_rng(seed)
    train_indices = set()
    for species in sorted(groups):
        members = groups[species]
        order = rng.permutation(len(members))
        n_train = math.ceil(len(members) / 2)
        train_indices.update(members[i] for i in order[:n_train])

    train = tuple(r for i, r in enumerate(manifest.records) if i in train_indices)
    test = tuple(r for i, r in enumerate(manifest.records) if i not in train_indices)
    metadata = dict(manifest.metadata, split_rule='first-listed species', split_seed=seed)
    base = manifest.label or 'eco'
    logger.info(f"📊 Stratified split over {len(groups)} species: {len(train)} train / {len(test)} test")
    return (
        DatasetManifest(train, label=f"{base}_train", seed=seed, metadata=metadata),
        DatasetManifest(test, label=f"{base}_test", seed=seed, metadata=metadata),
    )


def build_training_set(eco_train: DatasetManifest, patterns: DatasetManifest,
                       strategy: Union[TrainingStrategy, str]) -> DatasetManifest:
    """Join the ecological training half with pattern photos.

    AllPatterns keeps every pattern record (Data_1); MatchedPatterns keeps
    only those whose species occur in eco_train (Data_2).
    """
    strategy = TrainingStrategy(strategy)
    for record in patterns.records:
        if record.kind is not ImageKind.PATTERN:
            raise ManifestError("pattern manifest holds a non-pattern record", record.image_id)

    if strategy is TrainingStrategy.ALL_PATTERNS:
        selected = patterns.records
    else:
        eco_species = eco_train.species_set()
        selected = tuple(r for r in patterns.records if r.primary_species in eco_species)

    records = eco_train.records + tuple(selected)
    _check_unique_ids(records)
    metadata = dict(eco_train.metadata, strategy=strategy.value, pattern_records=len(selected))
    logger.info(f"✅ {strategy.label}: {len(eco_train)} ecological + {len(selected)} pattern records")
    return DatasetManifest(records, label=strategy.label, seed=eco_train.seed, metadata=metadata)

#!/usr/bin/env python3
"""
Detector Trainer
================

Minibatch sampling, SGD with momentum and weight decay, the step
learning-rate schedule, the training loop and prediction.

One image is processed per iteration. Its anchors are labelled against
the ground truth, 256 of them are sampled (at most half positive) for the
RPN loss, and a small ROI minibatch drawn from the current proposals,
the ground-truth boxes and jittered copies of them trains the species
classifier.
"""

import csv
import json
import logging
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from box_geometry import (AnchorLabel, GeometryConfig, LabelKind, ScoredBox, anchor_array, assign_label_codes,
                          encode_deltas_array, iou_matrix, nms_indices)
from dataset_manager import AnnotatedImage, BoundingBox, DatasetManifest
from detector_network import (Architecture, DetectorParams, LossBreakdown, RpnLossConfig,
                              TrainingTargets, backward, build_loss_graph, classify_roi, forward,
                              init_params, params_from_dict, params_to_dict, propose, roi_pool)
from image_codec import RasterImage, load_image, resize_nearest, to_network_input
from pipeline_errors import DivergenceError, ImageIOError, ManifestError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CHECKPOINT_FORMAT = 'butterfly-detector-checkpoint'
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    total_iters: int = 100000
    lr_step: Optional[int] = None  # None -> 70% of total_iters
    step_factor: float = 0.1
    rpn_batch: int = 256
    positive_fraction: float = 0.5
    roi_batch: int = 32
    roi_positive_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    roi_gt_jitter: int = 8  # jittered copies of each gt box offered as ROIs
    log_every: int = 20
    seed: int = 0

    def __post_init__(self):
        if min(self.initial_lr, self.step_factor) <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and step factor must be positive, momentum and decay non-negative")
        if not 0 < self.positive_fraction <= 1 or not 0 < self.roi_positive_fraction <= 1:
            raise ValueError("positive fractions must lie in (0, 1]")
        if self.roi_gt_jitter < 0:
            raise ValueError("roi_gt_jitter must be non-negative")

    @property
    def effective_lr_step(self) -> int:
        return self.lr_step if self.lr_step is not None else int(0.7 * self.total_iters)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> 'TrainConfig':
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in known})


@dataclass
class OptimizerState:
    """One velocity buffer per parameter tensor."""

    velocity: DetectorParams

    @classmethod
    def zeros(cls, params: DetectorParams) -> 'OptimizerState':
        return cls(params.zeros_like())


@dataclass
class LossRecord:
    iteration: int
    total: float
    cls: float
    reg: float
    roi_cls: float


@dataclass
class Checkpoint:
    """Parameters plus everything needed to reproduce or apply them.

    ``species`` order is the class-index mapping: class k+1 is species[k].
    """

    params: DetectorParams
    iteration: int
    config: TrainConfig
    species: List[str]
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    loss_config: RpnLossConfig = field(default_factory=RpnLossConfig)

    @property
    def architecture(self) -> Architecture:
        return self.params.architecture

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            'format': CHECKPOINT_FORMAT,
            'version': CHECKPOINT_VERSION,
            'iteration': self.iteration,
            'species': list(self.species),
            'architecture': self.architecture.to_dict(),
            'train_config': self.config.to_dict(),
            'geometry': self.geometry.to_dict(),
            'loss': {'lambda': self.loss_config.lambda_, 'n_cls': self.loss_config.n_cls,
                     'n_reg': self.loss_config.n_reg},
            'params': params_to_dict(self.params),
        }
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(payload, f)
        logger.info(f"✅ Checkpoint written to {path}")
        return path

    @classmethod
    def load(cls, path: PathLike) -> 'Checkpoint':
        path = Path(path)
        try:
            with open(path, 'r', encoding='utf-8') as f:
                payload = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ManifestError(f"cannot read checkpoint {path}: {e}")
        if payload.get('format') != CHECKPOINT_FORMAT or payload.get('version') != CHECKPOINT_VERSION:
            raise ManifestError(f"{path} is not a version {CHECKPOINT_VERSION} detector checkpoint")
        try:
            arch = Architecture.from_dict(payload['architecture'])
            species = list(payload['species'])
            loss = payload.get('loss', {})
            return cls(
                params=params_from_dict(payload['params'], arch, len(species)),
                iteration=int(payload['iteration']),
                config=TrainConfig.from_dict(payload['train_config']),
                species=species,
                geometry=GeometryConfig.from_dict(payload.get('geometry', {})),
                loss_config=RpnLossConfig(loss.get('lambda', 10.0), loss.get('n_cls', 256.0),
                                          loss.get('n_reg', 256.0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"corrupt checkpoint {path}: {e}")


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(e) for e in entropy]))


def sample_rpn_minibatch(labels, batch: int = 256, pos_fraction: float = 0.5,
                         seed: Union[int, Sequence[int]] = 0) -> np.ndarray:
    """Sorted anchor indices: up to pos_fraction*batch positives, negatives fill the rest."""
    if len(labels) and isinstance(labels[0], AnchorLabel):
        codes = np.array([int(l.kind) for l in labels])
    else:
        codes = np.asarray(labels)
    rng = _rng(*seed) if isinstance(seed, (tuple, list)) else _rng(seed)
    positives = np.flatnonzero(codes == int(LabelKind.POSITIVE))
    negatives = np.flatnonzero(codes == int(LabelKind.NEGATIVE))
    n_pos = min(len(positives), int(pos_fraction * batch))
    n_neg = min(len(negatives), batch - n_pos)
    chosen = np.concatenate([
        rng.choice(positives, n_pos, replace=False) if n_pos else np.zeros(0, dtype=np.int64),
        rng.choice(negatives, n_neg, replace=False) if n_neg else np.zeros(0, dtype=np.int64),
    ])
    return np.sort(chosen.astype(np.int64))


def sgd_step(params: DetectorParams, grads: DetectorParams, state: OptimizerState, lr: float,
             momentum: float, weight_decay: float) -> Tuple[DetectorParams, OptimizerState]:
    """v <- momentum*v - lr*(g + weight_decay*w); w <- w + v."""
    new_params = DetectorParams(architecture=params.architecture, num_classes=params.num_classes)
    new_velocity = DetectorParams(architecture=params.architecture, num_classes=params.num_classes)
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {w.shape}")
        v = momentum * state.velocity[name] - lr * (g + weight_decay * w)
        updated = w + v
        if not np.all(np.isfinite(updated)):
            raise DivergenceError(f"non-finite update for {name}")
        new_params[name] = updated
        new_velocity[name] = v
    return new_params, OptimizerState(new_velocity)


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Single-step decay: initial_lr before lr_step, initial_lr*step_factor from it on."""
    if iteration < config.effective_lr_step:
        return config.initial_lr
    return config.initial_lr * config.step_factor


# ---------------------------------------------------------------------------
# Sample preparation
# ---------------------------------------------------------------------------

class ImageCache:
    """Small LRU of decoded, resized network inputs."""

    def __init__(self, image_root: PathLike, input_size: int, capacity: int = 512):
        self.image_root = Path(image_root)
        self.input_size = input_size
        self.capacity = capacity
        self._items: 'OrderedDict[str, np.ndarray]' = OrderedDict()

    def get(self, record: AnnotatedImage) -> np.ndarray:
        if record.image_id in self._items:
            self._items.move_to_end(record.image_id)
            return self._items[record.image_id]
        image = load_image(self.image_root / record.path)
        x = to_network_input(resize_nearest(image, self.input_size, self.input_size))
        self._items[record.image_id] = x
        if len(self._items) > self.capacity:
            self._items.popitem(last=False)
        return x


def scaled_ground_truth(record: AnnotatedImage, input_size: int,
                        species_index: Dict[str, int]) -> Tuple[np.ndarray, np.ndarray]:
    """Boxes in network-input coordinates and their class indices (species k -> k+1)."""
    sx = input_size / record.width
    sy = input_size / record.height
    boxes = np.array([[sb.box.x_min * sx, sb.box.y_min * sy, sb.box.x_max * sx, sb.box.y_max * sy]
                      for sb in record.boxes], dtype=np.float64).reshape(-1, 4)
    labels = np.array([species_index[sb.species] + 1 for sb in record.boxes], dtype=np.int64)
    return boxes, labels


def jitter_boxes(boxes: np.ndarray, copies: int, rng: np.random.Generator,
                 shift: float = 0.15, log_scale: float = 0.2) -> np.ndarray:
    """``copies`` perturbed versions of each box: centre moved by up to ``shift``
    of the box size, width and height scaled by up to exp(+-log_scale)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if copies == 0 or boxes.shape[0] == 0:
        return np.zeros((0, 4))
    base = np.repeat(boxes, copies, axis=0)
    w = base[:, 2] - base[:, 0]
    h = base[:, 3] - base[:, 1]
    cx = base[:, 0] + 0.5 * w + rng.uniform(-shift, shift, len(base)) * w
    cy = base[:, 1] + 0.5 * h + rng.uniform(-shift, shift, len(base)) * h
    w = w * np.exp(rng.uniform(-log_scale, log_scale, len(base)))
    h = h * np.exp(rng.uniform(-log_scale, log_scale, len(base)))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    return np.maximum(out, 0.0)


def sample_roi_minibatch(proposals: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
                         config: TrainConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Foreground ROIs overlap a gt at >= roi_fg_iou and take its class; the rest are background.

    Candidates are the proposals, the gt boxes and ``roi_gt_jitter`` jittered
    copies of each gt box, so early proposals that miss every object still
    leave foreground to sample.
    """
    candidates = np.vstack([proposals.reshape(-1, 4), gt_boxes,
                            jitter_boxes(gt_boxes, config.roi_gt_jitter, rng)])
    overlaps = iou_matrix(candidates, gt_boxes)
    best = overlaps.argmax(axis=1)
    best_overlap = overlaps[np.arange(candidates.shape[0]), best]
    fg = np.flatnonzero(best_overlap >= config.roi_fg_iou)
    bg = np.flatnonzero(best_overlap < config.roi_fg_iou)
    n_fg = min(len(fg), int(round(config.roi_batch * config.roi_positive_fraction)))
    n_bg = min(len(bg), config.roi_batch - n_fg)
    fg = np.sort(rng.choice(fg, n_fg, replace=False)) if n_fg else fg[:0]
    bg = np.sort(rng.choice(bg, n_bg, replace=False)) if n_bg else bg[:0]
    chosen = np.concatenate([fg, bg]).astype(np.int64)
    labels = np.concatenate([gt_labels[best[fg]], np.zeros(len(bg), dtype=np.int64)])
    return candidates[chosen], labels


def build_targets(fwd, anchors: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
                  config: TrainConfig, geometry: GeometryConfig, input_size: int,
                  iteration: int) -> TrainingTargets:
    codes, matched = assign_label_codes(anchors, gt_boxes, geometry.positive_iou, geometry.negative_iou)
    idx = sample_rpn_minibatch(codes, config.rpn_batch, config.positive_fraction,
                               seed=(config.seed, iteration, 1))
    labels = (codes[idx] == int(LabelKind.POSITIVE)).astype(np.int64)
    delta_targets = np.zeros((len(idx), 4))
    pos = np.flatnonzero(labels == 1)
    if pos.size:
        delta_targets[pos] = encode_deltas_array(gt_boxes[matched[idx[pos]]], anchors[idx[pos]])

    proposals, _ = propose(fwd, anchors, input_size, geometry.proposal_nms, geometry.top_n,
                           geometry.pre_nms_top_n)
    roi_boxes, roi_labels = sample_roi_minibatch(proposals, gt_boxes, gt_labels, config,
                                                 _rng(config.seed, iteration, 2))
    return TrainingTargets(idx, labels, delta_targets, roi_boxes, roi_labels)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def write_loss_log(history: Sequence[LossRecord], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['iteration', 'total', 'cls', 'reg', 'roi_cls'])
        for r in history:
            writer.writerow([r.iteration, repr(r.total), repr(r.cls), repr(r.reg), repr(r.roi_cls)])
    return path


def train(train_manifest: DatasetManifest, config: TrainConfig, image_root: PathLike = '.',
          architecture: Architecture = Architecture(), geometry: GeometryConfig = GeometryConfig(),
          loss_config: Optional[RpnLossConfig] = None, species: Optional[Sequence[str]] = None,
          checkpoint_path: Optional[PathLike] = None,
          loss_log_path: Optional[PathLike] = None) -> Tuple[Checkpoint, List[LossRecord]]:
    """Train from scratch; fully reproducible for a fixed seed and input files."""
    if not len(train_manifest):
        raise ManifestError("training manifest is empty")
    if loss_config is None:
        loss_config = RpnLossConfig.for_architecture(architecture, config.rpn_batch)

    vocabulary = list(species) if species is not None else sorted(train_manifest.species_set())
    species_index = {s: i for i, s in enumerate(vocabulary)}
    missing = train_manifest.species_set() - set(species_index)
    if missing:
        raise ManifestError(f"species not in vocabulary: {sorted(missing)}")

    size = architecture.input_size
    anchors = anchor_array(architecture.feature_size, architecture.feature_size, architecture.stride,
                           geometry.anchor_scales, geometry.anchor_ratios)
    params = init_params(architecture, len(vocabulary), config.seed)
    state = OptimizerState.zeros(params)
    cache = ImageCache(image_root, size)
    records = train_manifest.records
    history: List[LossRecord] = []

    logger.info(f"🚀 Training on {len(records):,} images, {len(vocabulary)} species, "
                f"{config.total_iters:,} iterations, {params.size:,} parameters")
    start = time.time()
    order: np.ndarray = np.zeros(0, dtype=np.int64)
    for iteration in range(config.total_iters):
        position = iteration % len(records)
        if position == 0:
            order = _rng(config.seed, iteration // len(records), 0).permutation(len(records))
        record = records[order[position]]

        try:
            x = cache.get(record)
            gt_boxes, gt_labels = scaled_ground_truth(record, size, species_index)
            fwd = forward(x, params)
            targets = build_targets(fwd, anchors, gt_boxes, gt_labels, config, geometry, size, iteration)
            graph = build_loss_graph(fwd, params, targets, loss_config)
            grads = backward(graph)
            lr = lr_at(iteration, config)
            params, state = sgd_step(params, grads, state, lr, config.momentum, config.weight_decay)
        except DivergenceError as e:
            logger.error(f"❌ Training diverged at iteration {iteration}: {e}")
            raise DivergenceError(str(e), iteration=iteration)

        losses: LossBreakdown = graph.losses
        history.append(LossRecord(iteration, losses.total, losses.cls, losses.reg, losses.roi_cls))
        if iteration % config.log_every == 0 or iteration == config.total_iters - 1:
            logger.info(f"🔄 iter {iteration:>6} lr {lr:.6f} total {losses.total:.4f} "
                        f"cls {losses.cls:.4f} reg {losses.reg:.4f} roi {losses.roi_cls:.4f}")

    logger.info(f"✅ Training finished in {time.time() - start:.1f}s")
    checkpoint = Checkpoint(params, config.total_iters, config, vocabulary, geometry, loss_config)
    if checkpoint_path is not None:
        checkpoint.save(checkpoint_path)
    if loss_log_path is not None:
        write_loss_log(history, loss_log_path)
    return checkpoint, history


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    image_id: str
    detection: ScoredBox

    def to_dict(self) -> Dict[str, Any]:
        box = self.detection.box
        return {
            'image_id': self.image_id,
            'species': self.detection.class_id,
            'score': self.detection.score,
            'x_min': box.x_min,
            'y_min': box.y_min,
            'x_max': box.x_max,
            'y_max': box.y_max,
        }


@dataclass
class PredictionSet:
    predictions: List[Prediction] = field(default_factory=list)
    skipped: List[Tuple[str, str]] = field(default_factory=list)

    def for_image(self, image_id: str) -> List[ScoredBox]:
        return [p.detection for p in self.predictions if p.image_id == image_id]


def detect_image(checkpoint: Checkpoint, image: RasterImage, score_threshold: float,
                 nms_threshold: float) -> List[ScoredBox]:
    """Proposals -> ROI classification -> per-class NMS, in original image coordinates.

    A class keeps the proposals it scores strictly above score_threshold, so a
    threshold of 1.0 yields nothing even for saturated scores.
    """
    arch = checkpoint.architecture
    geometry = checkpoint.geometry
    size = arch.input_size
    anchors = anchor_array(arch.feature_size, arch.feature_size, arch.stride,
                           geometry.anchor_scales, geometry.anchor_ratios)
    fwd = forward(to_network_input(resize_nearest(image, size, size)), checkpoint.params)
    proposals, _ = propose(fwd, anchors, size, geometry.proposal_nms, geometry.top_n, geometry.pre_nms_top_n)
    if proposals.shape[0] == 0:
        return []

    probs = np.array([classify_roi(roi_pool(fwd.feature_map, p, arch.stride, arch.roi_size)[0],
                                   checkpoint.params) for p in proposals])
    scale = np.array([image.width / size, image.height / size] * 2)
    detections: List[ScoredBox] = []
    for k, species in enumerate(checkpoint.species, start=1):
        selected = np.flatnonzero(probs[:, k] > score_threshold)
        if selected.size == 0:
            continue
        keep = nms_indices(proposals[selected], probs[selected, k], nms_threshold)
        for i in selected[keep]:
            box = np.clip(proposals[i] * scale, 0.0, [image.width, image.height, image.width, image.height])
            detections.append(ScoredBox(BoundingBox(*(float(v) for v in box)), float(probs[i, k]), species))
    return detections


def predict(checkpoint: Checkpoint, manifest: DatasetManifest, score_threshold: float = 0.05,
            nms_threshold: float = 0.3, image_root: PathLike = '.') -> PredictionSet:
    """Detect every image in the manifest; unreadable images are skipped and recorded."""
    if not checkpoint.species:
        raise ManifestError("checkpoint has an empty species vocabulary")
    image_root = Path(image_root)
    result = PredictionSet()
    for record in manifest.records:
        try:
            image = load_image(image_root / record.path)
        except ImageIOError as e:
            logger.warning(f"⚠️  Skipping {record.image_id}: {e}")
            result.skipped.append((record.image_id, str(e)))
            continue
        for detection in detect_image(checkpoint, image, score_threshold, nms_threshold):
            result.predictions.append(Prediction(record.image_id, detection))
    logger.info(f"📊 {len(result.predictions):,} detections over {len(manifest):,} images "
                f"({len(result.skipped)} skipped)")
    return result


def write_predictions(result: PredictionSet, path: PathLike) -> Path:
    """JSON-lines detections; skipped images are recorded as {"image_id", "skipped"} lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for p in result.predictions:
            f.write(json.dumps(p.to_dict(), ensure_ascii=False) + '\n')
        for image_id, reason in result.skipped:
            f.write(json.dumps({'image_id': image_id, 'skipped': reason}, ensure_ascii=False) + '\n')
    return path

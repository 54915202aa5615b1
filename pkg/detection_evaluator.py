#!/usr/bin/env python3
"""
Detection Evaluator
===================

Scores predictions against a ground-truth manifest, one species at a time:

- greedy score-ranked matching at a strict IOU threshold (double
  detections of one butterfly are false positives)
- cumulative precision/recall curves
- AP by the block rule (recall split into n blocks) or by the VOC-2010
  envelope area, and the mean over test-set species
- precision/recall at the fixed operating point (score > 0.5, IOU > 0.5)

Only species present in the ground truth count towards mAP; a species
with ground truth but no predictions scores AP 0.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from box_geometry import ScoredBox, boxes_to_array, iou_matrix
from dataset_manager import BoundingBox, DatasetManifest
from detector_trainer import Prediction, PredictionSet
from pipeline_errors import EvaluationError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
GroundTruth = Mapping[str, Sequence[BoundingBox]]

VOC2010 = 'Voc2010'


def blocks_method(n: int) -> str:
    return f'Blocks({n})'


@dataclass(frozen=True)
class EvaluationConfig:
    iou_threshold: float = 0.5
    ap_method: str = 'voc2010'  # or 'blocks'
    blocks: int = 10
    operating_score: float = 0.5

    def __post_init__(self):
        if self.ap_method not in ('voc2010', 'blocks'):
            raise ValueError(f"unknown AP method {self.ap_method!r}")
        if self.blocks < 1:
            raise ValueError("block count must be at least 1")


@dataclass(frozen=True)
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total_gt(self) -> int:
        return self.tp + self.fn


@dataclass(frozen=True)
class MatchResult:
    """TP flags in descending-score order, the scores they belong to, and the counts."""

    flags: Tuple[bool, ...]
    scores: Tuple[float, ...]
    counts: MatchCounts


@dataclass(frozen=True)
class PrCurve:
    points: Tuple[Tuple[float, float], ...]  # (recall, precision)

    @property
    def recalls(self) -> np.ndarray:
        return np.array([p[0] for p in self.points], dtype=np.float64)

    @property
    def precisions(self) -> np.ndarray:
        return np.array([p[1] for p in self.points], dtype=np.float64)


@dataclass(frozen=True)
class ApResult:
    class_id: Optional[str]
    ap: float
    method: str


@dataclass
class MapReport:
    results: List[ApResult]
    map: float
    method: str
    counts: Dict[str, MatchCounts] = field(default_factory=dict)
    curves: Dict[str, PrCurve] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Matching and curves
# ---------------------------------------------------------------------------

def _as_pairs(preds: Iterable[Union[Prediction, Tuple[str, ScoredBox]]]) -> List[Tuple[str, ScoredBox]]:
    return [(p.image_id, p.detection) if isinstance(p, Prediction) else (p[0], p[1]) for p in preds]


def match_detections(preds, gts: GroundTruth, iou_threshold: float = 0.5) -> MatchResult:
    """Greedy matching of one class's detections against its ground truth.

    Detections are taken in descending score (stable for ties). Each one
    claims the best-overlapping still-unmatched gt box of its image whose
    IOU exceeds ``iou_threshold`` strictly; otherwise it is a false positive.
    """
    pairs = _as_pairs(preds)
    order = sorted(range(len(pairs)), key=lambda i: -pairs[i][1].score)
    gt_arrays = {image_id: boxes_to_array(boxes) for image_id, boxes in gts.items()}
    consumed = {image_id: np.zeros(len(boxes), dtype=bool) for image_id, boxes in gts.items()}

    flags: List[bool] = []
    for i in order:
        image_id, det = pairs[i]
        gt = gt_arrays.get(image_id)
        hit = False
        if gt is not None and gt.shape[0]:
            overlaps = iou_matrix(boxes_to_array([det.box]), gt)[0]
            overlaps[consumed[image_id]] = -1.0
            best = int(np.argmax(overlaps))
            if overlaps[best] > iou_threshold:
                consumed[image_id][best] = True
                hit = True
        flags.append(hit)

    total_gt = sum(len(boxes) for boxes in gts.values())
    tp = sum(flags)
    counts = MatchCounts(tp=tp, fp=len(flags) - tp, fn=total_gt - tp)
    return MatchResult(tuple(flags), tuple(pairs[i][1].score for i in order), counts)


def precision_recall(counts: MatchCounts) -> Tuple[float, float]:
    """precision = tp/(tp+fp), recall = tp/(tp+fn); 0/0 gives precision 1, recall 0."""
    predicted = counts.tp + counts.fp
    precision = counts.tp / predicted if predicted else 1.0
    recall = counts.tp / counts.total_gt if counts.total_gt else 0.0
    return precision, recall


def pr_curve(flags: Sequence[bool], total_gt: int) -> PrCurve:
    if total_gt <= 0:
        raise EvaluationError("cannot build a PR curve for a class with no ground truth")
    tp = np.cumsum(np.asarray(flags, dtype=np.int64))
    ranks = np.arange(1, len(flags) + 1)
    return PrCurve(tuple((float(t / total_gt), float(t / r)) for t, r in zip(tp, ranks)))


# ---------------------------------------------------------------------------
# Average precision
# ---------------------------------------------------------------------------

def _envelope(precisions: np.ndarray) -> np.ndarray:
    """Suffix maximum: best precision at this rank or any later one."""
    return np.maximum.accumulate(precisions[::-1])[::-1]


def ap_blocks(curve: PrCurve, n: int = 10, class_id: Optional[str] = None) -> ApResult:
    """(1/n) * sum over blocks of the best precision reachable at recall >= the block start."""
    if n < 1:
        raise ValueError("block count must be at least 1")
    recalls, precisions = curve.recalls, curve.precisions
    if recalls.size == 0:
        return ApResult(class_id, 0.0, blocks_method(n))
    envelope = np.append(_envelope(precisions), 0.0)
    starts = np.arange(n, dtype=np.float64) / n
    first = np.searchsorted(recalls, starts, side='left')
    ap = float(envelope[first].sum() / n)
    return ApResult(class_id, min(max(ap, 0.0), 1.0), blocks_method(n))


def ap_voc2010(curve: PrCurve, class_id: Optional[str] = None) -> ApResult:
    """Exact area under the monotone precision envelope."""
    mrec = np.concatenate([[0.0], curve.recalls, [1.0]])
    mpre = _envelope(np.concatenate([[0.0], curve.precisions, [0.0]]))
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    ap = float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))
    return ApResult(class_id, min(max(ap, 0.0), 1.0), VOC2010)


def mean_ap(results: Sequence[ApResult]) -> MapReport:
    if not results:
        raise EvaluationError("mAP needs at least one class result")
    methods = sorted({r.method for r in results})
    return MapReport(list(results), float(np.mean([r.ap for r in results])), ', '.join(methods))


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

def ground_truth_by_class(manifest: DatasetManifest) -> Dict[str, Dict[str, List[BoundingBox]]]:
    """species -> image_id -> boxes, species in sorted order."""
    by_class: Dict[str, Dict[str, List[BoundingBox]]] = {}
    for record in manifest.records:
        for sb in record.boxes:
            by_class.setdefault(sb.species, {}).setdefault(record.image_id, []).append(sb.box)
    return {s: by_class[s] for s in sorted(by_class)}


def _predictions_of(preds, species: str) -> List[Tuple[str, ScoredBox]]:
    return [(i, d) for i, d in _as_pairs(preds) if d.class_id == species]


def operating_point_report(preds, ground_truth: DatasetManifest, score_threshold: float = 0.5,
                           iou_threshold: float = 0.5) -> Dict[str, MatchCounts]:
    """Per-class counts after keeping detections with score > score_threshold (strict)."""
    kept = [(i, d) for i, d in _as_pairs(preds) if d.score > score_threshold]
    return {
        species: match_detections(_predictions_of(kept, species), gts, iou_threshold).counts
        for species, gts in ground_truth_by_class(ground_truth).items()
    }


def evaluate(predictions: Union[PredictionSet, Sequence[Prediction]], ground_truth: DatasetManifest,
             config: EvaluationConfig = EvaluationConfig()) -> MapReport:
    preds = predictions.predictions if isinstance(predictions, PredictionSet) else list(predictions)
    by_class = ground_truth_by_class(ground_truth)
    if not by_class:
        raise EvaluationError("ground truth holds no boxes")

    known_images = {r.image_id for r in ground_truth.records}
    stray = {p.image_id for p in preds} - known_images
    if stray:
        logger.warning(f"⚠️  Ignoring predictions for {len(stray)} image(s) not in the ground truth")
    extra = {p.detection.class_id for p in preds} - set(by_class)
    if extra:
        logger.warning(f"⚠️  Ignoring predictions of species absent from the test set: {sorted(extra)}")

    logger.info(f"🔄 Evaluating {len(preds):,} detections over {len(by_class)} species")
    results: List[ApResult] = []
    curves: Dict[str, PrCurve] = {}
    for species, gts in by_class.items():
        class_preds = _predictions_of(preds, species)
        if not class_preds:
            logger.warning(f"⚠️  No predictions for {species}; AP 0")
        match = match_detections(class_preds, gts, config.iou_threshold)
        curve = pr_curve(match.flags, match.counts.total_gt)
        curves[species] = curve
        if config.ap_method == 'blocks':
            results.append(ap_blocks(curve, config.blocks, species))
        else:
            results.append(ap_voc2010(curve, species))

    report = mean_ap(results)
    report.curves = curves
    report.counts = operating_point_report(preds, ground_truth, config.operating_score, config.iou_threshold)
    logger.info(f"📊 mAP ({report.method}) = {report.map:.4f} over {len(results)} species")
    return report


def write_report_csv(report: MapReport, path: PathLike) -> Path:
    """species,ap,precision,recall,tp,fp,fn rows followed by a mAP summary row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['species', 'ap', 'precision', 'recall', 'tp', 'fp', 'fn'])
        for result in report.results:
            counts = report.counts.get(result.class_id, MatchCounts())
            precision, recall = precision_recall(counts)
            writer.writerow([result.class_id, f"{result.ap:.6f}", f"{precision:.6f}", f"{recall:.6f}",
                             counts.tp, counts.fp, counts.fn])
        writer.writerow([f'mAP ({report.method})', f"{report.map:.6f}", '', '', '', '', ''])
    return path


def _safe_name(species: str) -> str:
    return ''.join(c if c.isalnum() or c in '-_.' else '_' for c in species)


def write_pr_curves(report: MapReport, output_dir: PathLike) -> List[Path]:
    """One recall,precision CSV per species."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for species, curve in report.curves.items():
        path = output_dir / f"pr_{_safe_name(species)}.csv"
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(['recall', 'precision'])
            for recall, precision in curve.points:
                writer.writerow([f"{recall:.6f}", f"{precision:.6f}"])
        written.append(path)
    return written


def read_predictions(path: PathLike) -> PredictionSet:
    """Parse the prediction JSON-lines written by the trainer."""
    path = Path(path)
    if not path.exists():
        raise EvaluationError(f"prediction file {path} not found")
    result = PredictionSet()
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                if 'skipped' in raw:
                    result.skipped.append((str(raw['image_id']), str(raw['skipped'])))
                    continue
                box = BoundingBox(float(raw['x_min']), float(raw['y_min']),
                                  float(raw['x_max']), float(raw['y_max']))
                detection = ScoredBox(box, float(raw['score']), str(raw['species']))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise EvaluationError(f"{path}, line {line_no}: malformed prediction ({e})")
            result.predictions.append(Prediction(str(raw['image_id']), detection))
    return result

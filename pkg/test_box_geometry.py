#!/usr/bin/env python3
"""
Tests for IOU, anchors, delta encoding, anchor labelling and NMS.
"""

import math

import numpy as np
import pytest

from box_geometry import (Anchor, BoxDelta, LabelKind, ScoredBox, anchor_array, assign_anchor_labels,
                          assign_label_codes, boxes_to_array, decode_delta, decode_deltas_array, encode_delta,
                          generate_anchors, iou, iou_matrix, nms, nms_indices)
from dataset_manager import BoundingBox


def _random_box(rng, size=100.0):
    x0, x1 = sorted(rng.uniform(0, size, 2))
    y0, y1 = sorted(rng.uniform(0, size, 2))
    return BoundingBox(x0, y0, x1 + 1e-3, y1 + 1e-3)


# ---------------------------------------------------------------------------
# IOU
# ---------------------------------------------------------------------------

def test_iou_examples():
    a = BoundingBox(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox(20, 20, 30, 30)) == 0.0
    assert iou(a, BoundingBox(5, 5, 15, 15)) == pytest.approx(25 / 175)


def test_iou_properties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, b = _random_box(rng), _random_box(rng)
        assert 0.0 <= iou(a, b) <= 1.0
        assert iou(a, b) == pytest.approx(iou(b, a))
        assert iou_matrix(boxes_to_array([a]), boxes_to_array([b]))[0, 0] == pytest.approx(iou(a, b))


def test_touching_boxes_do_not_overlap():
    assert iou(BoundingBox(0, 0, 5, 5), BoundingBox(5, 0, 10, 5)) == 0.0


# ---------------------------------------------------------------------------
# Anchors
# ---------------------------------------------------------------------------

def test_single_cell_has_nine_anchors_sharing_a_centre():
    anchors = generate_anchors(1, 1, 16)
    assert len(anchors) == 9
    assert {(a.center_x, a.center_y) for a in anchors} == {(8.0, 8.0)}


def test_anchor_count_and_shapes():
    anchors = generate_anchors(16, 16, 8, scales=(32, 64, 128), ratios=(0.5, 1, 2))
    assert len(anchors) == 2304
    # ratio-major within a cell: slot 4 is scale 64, ratio 1
    assert (anchors[4].width, anchors[4].height) == (64, 64)
    for k, a in enumerate(anchors[:9]):
        scale, ratio = (32, 64, 128)[k % 3], (0.5, 1, 2)[k // 3]
        assert a.width * a.height == pytest.approx(scale * scale)
        assert a.width / a.height == pytest.approx(ratio)


def test_anchor_array_matches_anchor_list():
    anchors = generate_anchors(3, 2, 8)
    expected = boxes_to_array([a.to_box() for a in anchors])
    np.testing.assert_allclose(anchor_array(3, 2, 8), expected)
    # second cell in row-major order is one stride to the right
    assert anchors[9].center_x - anchors[0].center_x == 8


def test_anchors_need_three_scales_and_ratios():
    with pytest.raises(ValueError):
        generate_anchors(2, 2, 8, scales=(32, 64))


# ---------------------------------------------------------------------------
# Deltas
# ---------------------------------------------------------------------------

def test_encode_identity_is_zero():
    anchor = Anchor(20, 30, 16, 8)
    delta = encode_delta(anchor.to_box(), anchor)
    assert delta.as_tuple() == pytest.approx((0, 0, 0, 0))
    assert decode_delta(BoxDelta(0, 0, 0, 0), anchor) == anchor.to_box()


def test_encode_decode_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(500):
        gt = _random_box(rng)
        anchor = Anchor(rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(4, 80), rng.uniform(4, 80))
        back = decode_delta(encode_delta(gt, anchor), anchor, bounds=(101, 101))
        np.testing.assert_allclose(back.as_tuple(), gt.as_tuple(), atol=1e-6)


def test_decode_saturates_and_clips():
    anchor = Anchor(50, 50, 10, 10)
    box = decode_delta(BoxDelta(0, 0, 1e6, -1e6), anchor, bounds=(100, 100))
    assert all(math.isfinite(v) for v in box.as_tuple())
    assert box.x_min == 0 and box.x_max == 100
    boxes = decode_deltas_array(np.array([[5.0, 5.0, 0.0, 0.0]]), np.array([[0.0, 0.0, 10.0, 10.0]]), 20, 20)
    np.testing.assert_allclose(boxes, [[20.0, 20.0, 20.0, 20.0]])


# ---------------------------------------------------------------------------
# Anchor labelling
# ---------------------------------------------------------------------------

def test_identical_anchor_is_positive():
    gt = BoundingBox(10, 10, 42, 42)
    labels = assign_anchor_labels([Anchor(26, 26, 32, 32), Anchor(200, 200, 32, 32)], [gt])
    assert labels[0].kind is LabelKind.POSITIVE and labels[0].gt_index == 0
    assert labels[1].kind is LabelKind.NEGATIVE


def test_best_anchor_is_positive_below_threshold():
    gt = BoundingBox(0, 0, 10, 10)
    anchors = [Anchor(5, 5, 20, 20), Anchor(5, 5, 14, 14), Anchor(30, 30, 4, 4),
               Anchor(8, 8, 10, 10), Anchor(60, 60, 10, 10)]
    overlaps = [iou(a.to_box(), gt) for a in anchors]
    assert max(overlaps) < 0.7
    labels = assign_anchor_labels(anchors, [gt])
    best = int(np.argmax(overlaps))
    assert labels[best].kind is LabelKind.POSITIVE
    for k, overlap in enumerate(overlaps):
        if k == best:
            continue
        expected = LabelKind.NEGATIVE if overlap <= 0.3 else LabelKind.IGNORE
        assert labels[k].kind is expected


def test_every_gt_gets_a_positive_anchor():
    rng = np.random.default_rng(2)
    anchors = anchor_array(8, 8, 8)
    for _ in range(50):
        gts = boxes_to_array([_random_box(rng, 64) for _ in range(rng.integers(1, 5))])
        codes, matched = assign_label_codes(anchors, gts)
        overlaps = iou_matrix(anchors, gts)
        for j in range(gts.shape[0]):
            best = overlaps[:, j].argmax()
            assert codes[best] == LabelKind.POSITIVE
            shared = any(overlaps[best, k] == overlaps[:, k].max() for k in range(gts.shape[0]) if k != j)
            if not shared:
                assert matched[best] == j or overlaps[best, matched[best]] >= 0.7


def test_best_anchor_regresses_toward_its_own_gt():
    # the small gt's best anchor overlaps the large gt more, but below hi
    small, large = BoundingBox(0, 0, 4, 4), BoundingBox(0, 0, 10, 10)
    anchors = [Anchor(5, 5, 10, 10), Anchor(3, 5, 6, 10), Anchor(100, 100, 4, 4)]
    labels = assign_anchor_labels(anchors, [small, large])
    assert [label.kind for label in labels] == [LabelKind.POSITIVE, LabelKind.POSITIVE, LabelKind.NEGATIVE]
    assert {label.gt_index for label in labels if label.kind is LabelKind.POSITIVE} == {0, 1}
    assert labels[1].gt_index == 0


def test_no_gts_means_all_negative():
    codes, _ = assign_label_codes(anchor_array(2, 2, 8), np.zeros((0, 4)))
    assert np.all(codes == LabelKind.NEGATIVE)


def test_label_thresholds_must_be_ordered():
    with pytest.raises(ValueError):
        assign_label_codes(anchor_array(1, 1, 8), np.array([[0, 0, 8, 8.0]]), hi=0.3, lo=0.3)


# ---------------------------------------------------------------------------
# NMS
# ---------------------------------------------------------------------------

def _nms_oracle(candidates, threshold, top_n):
    remaining = sorted(range(len(candidates)),
                       key=lambda i: (-candidates[i].score, candidates[i].box.as_tuple()))
    kept = []
    while remaining and len(kept) < top_n:
        best = remaining.pop(0)
        kept.append(best)
        remaining = [i for i in remaining if iou(candidates[i].box, candidates[best].box) <= threshold]
    return kept


def test_nms_identical_boxes():
    box = BoundingBox(0, 0, 10, 10)
    kept = nms([ScoredBox(box, 0.8), ScoredBox(box, 0.9)], 0.5)
    assert [c.score for c in kept] == [0.9]


def test_nms_keeps_disjoint_boxes_up_to_top_n():
    candidates = [ScoredBox(BoundingBox(20 * i, 0, 20 * i + 10, 10), 0.1 * i) for i in range(1, 6)]
    assert [c.score for c in nms(candidates, 0.5)] == pytest.approx([0.5, 0.4, 0.3, 0.2, 0.1])
    assert len(nms(candidates, 0.5, top_n=2)) == 2


def test_nms_ties_break_on_coordinates():
    candidates = [ScoredBox(BoundingBox(5, 0, 15, 10), 0.5), ScoredBox(BoundingBox(0, 0, 10, 10), 0.5)]
    assert nms(candidates, 0.2)[0].box == BoundingBox(0, 0, 10, 10)


def test_nms_matches_greedy_oracle():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        candidates = [ScoredBox(_random_box(rng, 50), float(rng.uniform())) for _ in range(10)]
        threshold = float(rng.uniform(0.1, 0.9))
        top_n = int(rng.integers(1, 11))
        keep = list(nms_indices(boxes_to_array([c.box for c in candidates]),
                                np.array([c.score for c in candidates]), threshold, top_n))
        assert keep == _nms_oracle(candidates, threshold, top_n)
        for i in keep:
            for j in keep:
                if i != j:
                    assert iou(candidates[i].box, candidates[j].box) <= threshold + 1e-12
        scores = [candidates[i].score for i in keep]
        assert scores == sorted(scores, reverse=True)


def test_nms_threshold_range():
    with pytest.raises(ValueError):
        nms_indices(np.zeros((1, 4)), np.zeros(1), 1.0)

#!/usr/bin/env python3
"""
Detector Network
================

A small two-stage detector written directly in numpy:

    image (3, S, S) in [-0.5, 0.5]
      -> 3 x [conv 3x3 + ReLU + max-pool 2x2]      shared backbone, stride 8
      -> RPN conv 3x3 + ReLU
           -> 1x1 score head (2 logits per anchor: background, object)
           -> 1x1 delta head (4 deltas per anchor)
      -> ROI max-pooling of proposals on the backbone features
      -> fully-connected classifier over C species + background

Losses are the RPN multi-task loss (binary cross-entropy plus
smooth-L1 box regression, weighted by lambda) and the ROI softmax
cross-entropy. ``backward`` returns exact analytic gradients for every
parameter tensor.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from box_geometry import (AnchorLabel, BoxDelta, LabelKind, decode_deltas_array,
                          nms_indices)
from dataset_manager import BoundingBox
from image_codec import RasterImage, to_network_input
from pipeline_errors import DivergenceError

logger = logging.getLogger(__name__)

ANCHORS_PER_CELL = 9
_LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class Architecture:
    """Fixed layer sizes; defaults are the desk-scale network."""

    input_size: int = 128
    conv_channels: Tuple[int, int, int] = (8, 16, 32)
    rpn_channels: int = 32
    roi_size: int = 4

    @property
    def stride(self) -> int:
        return 8

    @property
    def feature_size(self) -> int:
        return self.input_size // self.stride

    @property
    def num_anchors(self) -> int:
        return self.feature_size * self.feature_size * ANCHORS_PER_CELL

    def to_dict(self) -> Dict[str, Any]:
        return {
            'input_size': self.input_size,
            'conv_channels': list(self.conv_channels),
            'rpn_channels': self.rpn_channels,
            'roi_size': self.roi_size,
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> 'Architecture':
        return cls(
            input_size=int(raw.get('input_size', 128)),
            conv_channels=tuple(int(c) for c in raw.get('conv_channels', (8, 16, 32))),
            rpn_channels=int(raw.get('rpn_channels', 32)),
            roi_size=int(raw.get('roi_size', 4)),
        )


@dataclass(frozen=True)
class RpnLossConfig:
    """lambda weights the regression term; n_cls and n_reg normalize the two terms."""

    lambda_: float = 10.0
    n_cls: float = 256.0
    n_reg: float = 256.0

    def __post_init__(self):
        if min(self.lambda_, self.n_cls, self.n_reg) <= 0:
            raise ValueError("RPN loss weights and normalizers must be positive")

    @classmethod
    def for_architecture(cls, arch: Architecture, rpn_batch: int = 256, lambda_: float = 10.0,
                         n_cls: Optional[float] = None, n_reg: Optional[float] = None) -> 'RpnLossConfig':
        """Unset normalizers follow the minibatch size (n_cls) and the feature-map cell count (n_reg)."""
        return cls(float(lambda_),
                   float(n_cls if n_cls is not None else rpn_batch),
                   float(n_reg if n_reg is not None else arch.feature_size ** 2))


class DetectorParams(OrderedDict):
    """Parameter tensors by name, in a fixed order."""

    def __init__(self, tensors=(), architecture: Optional[Architecture] = None,
                 num_classes: Optional[int] = None):
        super().__init__(tensors)
        self.architecture = architecture or Architecture()
        self.num_classes = num_classes

    def copy(self) -> 'DetectorParams':
        return DetectorParams(((k, v.copy()) for k, v in self.items()), self.architecture, self.num_classes)

    def zeros_like(self) -> 'DetectorParams':
        return DetectorParams(((k, np.zeros_like(v)) for k, v in self.items()),
                              self.architecture, self.num_classes)

    @property
    def size(self) -> int:
        return sum(v.size for v in self.values())


def param_shapes(arch: Architecture, num_classes: int) -> 'OrderedDict[str, Tuple[int, ...]]':
    c1, c2, c3 = arch.conv_channels
    r = arch.rpn_channels
    pooled = c3 * arch.roi_size * arch.roi_size
    return OrderedDict([
        ('conv1_w', (c1, 3, 3, 3)), ('conv1_b', (c1,)),
        ('conv2_w', (c2, c1, 3, 3)), ('conv2_b', (c2,)),
        ('conv3_w', (c3, c2, 3, 3)), ('conv3_b', (c3,)),
        ('rpn_w', (r, c3, 3, 3)), ('rpn_b', (r,)),
        ('score_w', (2 * ANCHORS_PER_CELL, r)), ('score_b', (2 * ANCHORS_PER_CELL,)),
        ('delta_w', (4 * ANCHORS_PER_CELL, r)), ('delta_b', (4 * ANCHORS_PER_CELL,)),
        ('cls_w', (num_classes + 1, pooled)), ('cls_b', (num_classes + 1,)),
    ])


def init_params(arch: Architecture, num_classes: int, seed: int) -> DetectorParams:
    """Uniform in [-s, s], s = sqrt(1 / fan_in) of the owning layer."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(arch, num_classes)
    params = DetectorParams(architecture=arch, num_classes=num_classes)
    for name, shape in shapes.items():
        weight_shape = shapes[name[:-2] + '_w']
        fan_in = int(np.prod(weight_shape[1:]))
        s = math.sqrt(1.0 / fan_in)
        params[name] = rng.uniform(-s, s, size=shape)
    return params


def zero_params(arch: Architecture, num_classes: int) -> DetectorParams:
    return DetectorParams(((n, np.zeros(s)) for n, s in param_shapes(arch, num_classes).items()),
                          arch, num_classes)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padded 3x3 convolution of (C, H, W) input with (F, C, 3, 3) kernels."""
    c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).transpose(1, 2, 0, 3, 4).reshape(h * wd, c * 9)
    out = (cols @ w.reshape(w.shape[0], -1).T + b).T.reshape(w.shape[0], h, wd)
    return out, (cols, x.shape)


def conv3x3_backward(dout: np.ndarray, cache, w: np.ndarray, need_dx: bool = True):
    cols, (c, h, wd) = cache
    f = w.shape[0]
    d = dout.reshape(f, -1)
    dw = (d @ cols).reshape(w.shape)
    db = d.sum(axis=1)
    if not need_dx:
        return None, dw, db
    dcols = (d.T @ w.reshape(f, -1)).reshape(h, wd, c, 3, 3)
    dxp = np.zeros((c, h + 2, wd + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + wd] += dcols[:, :, :, i, j].transpose(2, 0, 1)
    return dxp[:, 1:-1, 1:-1], dw, db


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0.0), x


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def maxpool2_forward(x: np.ndarray):
    c, h, w = x.shape
    blocks = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(dout: np.ndarray, cache) -> np.ndarray:
    idx, (c, h, w) = cache
    dblocks = np.zeros((c, h // 2, w // 2, 4))
    np.put_along_axis(dblocks, idx[..., None], dout[..., None], axis=-1)
    return dblocks.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

@dataclass
class DetectorForward:
    """Outputs of one forward pass plus the caches backward needs.

    rpn_logits/rpn_scores are (A, 2) [background, object]; rpn_deltas (A, 4).
    Anchor a lives at cell a // 9 (row-major) in slot a % 9.
    """

    rpn_logits: np.ndarray
    rpn_scores: np.ndarray
    rpn_deltas: np.ndarray
    feature_map: np.ndarray
    caches: Dict[str, Any] = field(repr=False, default_factory=dict)


def _check_finite(name: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise DivergenceError(f"non-finite values in {name}")


def forward(image: Union[np.ndarray, RasterImage], params: DetectorParams) -> DetectorForward:
    """Backbone and RPN heads for one normalized (3, S, S) image."""
    x = to_network_input(image) if isinstance(image, RasterImage) else np.asarray(image, dtype=np.float64)
    caches: Dict[str, Any] = {}
    h = x
    for layer in ('conv1', 'conv2', 'conv3'):
        pre, caches[f'{layer}_conv'] = conv3x3_forward(h, params[f'{layer}_w'], params[f'{layer}_b'])
        act, caches[f'{layer}_relu'] = relu_forward(pre)
        h, caches[f'{layer}_pool'] = maxpool2_forward(act)
    feature_map = h
    _check_finite('backbone features', feature_map)

    rpn_pre, caches['rpn_conv'] = conv3x3_forward(feature_map, params['rpn_w'], params['rpn_b'])
    rpn_feat, caches['rpn_relu'] = relu_forward(rpn_pre)
    r, hf, wf = rpn_feat.shape
    flat = rpn_feat.reshape(r, -1)
    caches['rpn_flat'] = flat
    score_out = params['score_w'] @ flat + params['score_b'][:, None]  # (18, P)
    delta_out = params['delta_w'] @ flat + params['delta_b'][:, None]  # (36, P)

    logits = score_out.T.reshape(-1, 2)
    deltas = delta_out.T.reshape(-1, 4)
    _check_finite('RPN outputs', logits)
    _check_finite('RPN outputs', deltas)
    return DetectorForward(logits, softmax(logits), deltas, feature_map, caches)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def smooth_l1(x):
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * np.square(x), ax - 0.5)
    return float(out) if np.ndim(out) == 0 else out


def smooth_l1_grad(x):
    out = np.where(np.abs(x) < 1.0, x, np.sign(x))
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class RpnLossResult:
    total: float
    cls: float
    reg: float
    grad_obj_logit: np.ndarray  # d total / d object logit; the background logit gets the negative
    grad_deltas: np.ndarray


def _label_vector(labels) -> np.ndarray:
    if len(labels) and isinstance(labels[0], AnchorLabel):
        if any(l.kind is LabelKind.IGNORE for l in labels):
            raise ValueError("sampled labels must not contain Ignore entries")
        return np.array([1.0 if l.kind is LabelKind.POSITIVE else 0.0 for l in labels])
    codes = np.asarray(labels, dtype=np.float64)
    if np.any((codes != 0) & (codes != 1)):
        raise ValueError("sampled labels must be 0 (negative) or 1 (positive)")
    return codes


def rpn_loss(scores: np.ndarray, deltas: np.ndarray, labels, targets,
             config: RpnLossConfig = RpnLossConfig()) -> RpnLossResult:
    """RPN multi-task loss over a sampled anchor minibatch.

    total = (1/N_cls) sum BCE(p_i, p*_i) + lambda (1/N_reg) sum p*_i smoothL1(t_i - t*_i)

    ``scores`` are object probabilities (n,) or softmax pairs (n, 2);
    ``targets`` is an (n, 4) array aligned with the sample or a list of
    BoxDelta, one per positive in sample order.
    """
    p = np.asarray(scores, dtype=np.float64)
    if p.ndim == 2:
        p = p[:, 1]
    p_star = _label_vector(labels)
    t = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)

    if isinstance(targets, np.ndarray):
        t_star = targets.reshape(-1, 4).astype(np.float64)
    else:
        t_star = np.zeros_like(t)
        positives = np.flatnonzero(p_star == 1)
        if len(targets) != len(positives):
            raise ValueError(f"expected {len(positives)} positive targets, got {len(targets)}")
        for row, delta in zip(positives, targets):
            t_star[row] = delta.as_tuple() if isinstance(delta, BoxDelta) else delta

    prob_true = np.where(p_star == 1, p, 1.0 - p)
    cls_terms = -np.log(np.maximum(prob_true, _LOG_FLOOR))
    cls = float(cls_terms.sum() / config.n_cls)

    diff = (t - t_star) * p_star[:, None]
    reg = float(config.lambda_ * smooth_l1(diff).sum() / config.n_reg) if diff.size else 0.0

    grad_obj = (p - p_star) / config.n_cls
    grad_deltas = config.lambda_ / config.n_reg * p_star[:, None] * smooth_l1_grad(diff)
    return RpnLossResult(cls + reg, cls, reg, grad_obj, np.asarray(grad_deltas).reshape(-1, 4))


# ---------------------------------------------------------------------------
# ROI head
# ---------------------------------------------------------------------------

def _footprint(lo: float, hi: float, stride: int, limit: int) -> Tuple[int, int]:
    start = min(max(int(math.floor(lo / stride)), 0), limit - 1)
    end = min(max(int(math.ceil(hi / stride)), start + 1), limit)
    return start, end


def roi_pool(feature_map: np.ndarray, proposal, stride: int = 8, out: int = 4):
    """Max-pool a proposal's feature footprint into an out x out grid.

    Returns (pooled (C, out, out), argmax (C, out, out) flat indices into the
    feature map). Sub-cell proposals are clamped to a one-cell footprint.
    """
    box = proposal.as_tuple() if isinstance(proposal, BoundingBox) else tuple(proposal)
    c, hf, wf = feature_map.shape
    x0, x1 = _footprint(box[0], box[2], stride, wf)
    y0, y1 = _footprint(box[1], box[3], stride, hf)
    w, h = x1 - x0, y1 - y0

    pooled = np.empty((c, out, out))
    argmax = np.empty((c, out, out), dtype=np.int64)
    flat = feature_map.reshape(c, -1)
    channels = np.arange(c)
    for i in range(out):
        ys = y0 + (i * h) // out
        ye = max(y0 + -((-(i + 1) * h) // out), ys + 1)
        for j in range(out):
            xs = x0 + (j * w) // out
            xe = max(x0 + -((-(j + 1) * w) // out), xs + 1)
            rows, cols = np.meshgrid(np.arange(ys, ye), np.arange(xs, xe), indexing='ij')
            cells = (rows * wf + cols).ravel()
            region = flat[:, cells]
            best = region.argmax(axis=1)
            argmax[:, i, j] = cells[best]
            pooled[:, i, j] = region[channels, best]
    return pooled, argmax


def roi_logits(pooled: np.ndarray, params: DetectorParams) -> np.ndarray:
    return params['cls_w'] @ pooled.ravel() + params['cls_b']


def classify_roi(pooled: np.ndarray, params: DetectorParams) -> np.ndarray:
    """Softmax over background + C species."""
    return softmax(roi_logits(pooled, params))


# ---------------------------------------------------------------------------
# Loss graph and backward
# ---------------------------------------------------------------------------

@dataclass
class TrainingTargets:
    """Sampled supervision for one image.

    anchor_indices/anchor_labels/delta_targets describe the RPN minibatch;
    roi_boxes (input-image coordinates) and roi_labels (0 = background,
    k = species k-1) describe the ROI minibatch.
    """

    anchor_indices: np.ndarray
    anchor_labels: np.ndarray
    delta_targets: np.ndarray
    roi_boxes: np.ndarray
    roi_labels: np.ndarray


@dataclass
class LossBreakdown:
    total: float
    cls: float
    reg: float
    roi_cls: float


@dataclass
class LossGraph:
    forward: DetectorForward
    params: DetectorParams
    targets: TrainingTargets
    losses: LossBreakdown
    rpn: RpnLossResult
    roi_argmax: List[np.ndarray]
    roi_dlogits: np.ndarray


def build_loss_graph(fwd: DetectorForward, params: DetectorParams, targets: TrainingTargets,
                     config: RpnLossConfig = RpnLossConfig()) -> LossGraph:
    """Evaluate RPN and ROI losses for one forward pass."""
    idx = np.asarray(targets.anchor_indices, dtype=np.int64)
    rpn = rpn_loss(fwd.rpn_scores[idx], fwd.rpn_deltas[idx], targets.anchor_labels,
                   np.asarray(targets.delta_targets, dtype=np.float64), config)

    arch = params.architecture
    roi_boxes = np.asarray(targets.roi_boxes, dtype=np.float64).reshape(-1, 4)
    roi_labels = np.asarray(targets.roi_labels, dtype=np.int64)
    m = roi_boxes.shape[0]
    argmaxes = []
    dlogits = np.zeros((m, params['cls_b'].shape[0]))
    roi_cls = 0.0
    for k in range(m):
        pooled, argmax = roi_pool(fwd.feature_map, roi_boxes[k], arch.stride, arch.roi_size)
        probs = classify_roi(pooled, params)
        roi_cls -= math.log(max(probs[roi_labels[k]], _LOG_FLOOR))
        d = probs.copy()
        d[roi_labels[k]] -= 1.0
        dlogits[k] = d
        argmaxes.append(argmax)
    if m:
        roi_cls /= m
        dlogits /= m

    losses = LossBreakdown(rpn.total + roi_cls, rpn.cls, rpn.reg, roi_cls)
    if not math.isfinite(losses.total):
        raise DivergenceError("non-finite loss")
    return LossGraph(fwd, params, targets, losses, rpn, argmaxes, dlogits)


def backward(graph: LossGraph) -> DetectorParams:
    """Exact gradients of total loss with respect to every parameter."""
    fwd, params, caches = graph.forward, graph.params, graph.forward.caches
    grads = params.zeros_like()
    num_anchors = fwd.rpn_logits.shape[0]
    _, hf, wf = fwd.feature_map.shape
    idx = np.asarray(graph.targets.anchor_indices, dtype=np.int64)

    # RPN heads
    d_logits = np.zeros((num_anchors, 2))
    np.add.at(d_logits[:, 1], idx, graph.rpn.grad_obj_logit)
    np.add.at(d_logits[:, 0], idx, -graph.rpn.grad_obj_logit)
    d_deltas = np.zeros((num_anchors, 4))
    np.add.at(d_deltas, idx, graph.rpn.grad_deltas)
    d_score = d_logits.reshape(hf * wf, -1).T  # (18, P)
    d_delta = d_deltas.reshape(hf * wf, -1).T  # (36, P)

    flat = caches['rpn_flat']
    grads['score_w'] = d_score @ flat.T
    grads['score_b'] = d_score.sum(axis=1)
    grads['delta_w'] = d_delta @ flat.T
    grads['delta_b'] = d_delta.sum(axis=1)
    d_rpn_feat = (params['score_w'].T @ d_score + params['delta_w'].T @ d_delta).reshape(-1, hf, wf)
    d_rpn_pre = relu_backward(d_rpn_feat, caches['rpn_relu'])
    d_feat, grads['rpn_w'], grads['rpn_b'] = conv3x3_backward(d_rpn_pre, caches['rpn_conv'], params['rpn_w'])

    # ROI classifier
    c3 = fwd.feature_map.shape[0]
    d_feat_flat = d_feat.reshape(c3, -1)
    channels = np.broadcast_to(np.arange(c3)[:, None, None], graph.roi_argmax[0].shape) \
        if graph.roi_argmax else None
    for k, argmax in enumerate(graph.roi_argmax):
        dl = graph.roi_dlogits[k]
        pooled_values = np.take_along_axis(fwd.feature_map.reshape(c3, -1), argmax.reshape(c3, -1), axis=1)
        grads['cls_w'] += np.outer(dl, pooled_values.ravel())
        grads['cls_b'] += dl
        d_pooled = (params['cls_w'].T @ dl).reshape(argmax.shape)
        np.add.at(d_feat_flat, (channels, argmax), d_pooled)
    d_feat = d_feat_flat.reshape(d_feat.shape)

    # Backbone
    dh = d_feat
    for layer in ('conv3', 'conv2', 'conv1'):
        d_act = maxpool2_backward(dh, caches[f'{layer}_pool'])
        d_pre = relu_backward(d_act, caches[f'{layer}_relu'])
        dh, grads[f'{layer}_w'], grads[f'{layer}_b'] = conv3x3_backward(
            d_pre, caches[f'{layer}_conv'], params[f'{layer}_w'], need_dx=layer != 'conv1')

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
    return grads


def loss_and_gradients(image: np.ndarray, params: DetectorParams, targets: TrainingTargets,
                       config: RpnLossConfig = RpnLossConfig()) -> Tuple[LossBreakdown, DetectorParams]:
    graph = build_loss_graph(forward(image, params), params, targets, config)
    return graph.losses, backward(graph)


# ---------------------------------------------------------------------------
# Proposals
# ---------------------------------------------------------------------------

def propose(fwd: DetectorForward, anchors: np.ndarray, image_size: int, nms_threshold: float = 0.7,
            top_n: int = 300, pre_nms_top_n: Optional[int] = 1000) -> Tuple[np.ndarray, np.ndarray]:
    """Decode RPN deltas, drop empty boxes, NMS by objectness and keep the top_n."""
    scores = fwd.rpn_scores[:, 1]
    boxes = decode_deltas_array(fwd.rpn_deltas, anchors, image_size, image_size)
    valid = np.flatnonzero(((boxes[:, 2] - boxes[:, 0]) >= 1.0) & ((boxes[:, 3] - boxes[:, 1]) >= 1.0))
    if pre_nms_top_n is not None and valid.size > pre_nms_top_n:
        order = np.argsort(-scores[valid], kind='stable')[:pre_nms_top_n]
        valid = valid[order]
    keep = nms_indices(boxes[valid], scores[valid], nms_threshold, top_n)
    return boxes[valid][keep], scores[valid][keep]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def params_to_dict(params: DetectorParams) -> Dict[str, Any]:
    return {
        name: {'shape': list(value.shape), 'data': value.ravel().tolist()}
        for name, value in params.items()
    }


def params_from_dict(raw: Dict[str, Any], arch: Architecture, num_classes: int) -> DetectorParams:
    expected = param_shapes(arch, num_classes)
    params = DetectorParams(architecture=arch, num_classes=num_classes)
    for name, shape in expected.items():
        if name not in raw:
            raise ValueError(f"checkpoint is missing tensor '{name}'")
        entry = raw[name]
        if tuple(entry['shape']) != shape:
            raise ValueError(f"tensor '{name}' has shape {entry['shape']}, expected {list(shape)}")
        params[name] = np.array(entry['data'], dtype=np.float64).reshape(shape)
    return params

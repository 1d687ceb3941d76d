"""Reference tiny two-stage detector and the model contract the adaptation loop consumes.

The architecture mirrors the classic region-proposal design so the loss
decomposition keeps the usual two-stage split — a dense anchor head
(objectness + box regression) and a region head (classification + box
refinement) — but capacity is shrunk ~100x for CPU feasibility:

* backbone: three stride-2 3x3 conv stages (input 320 -> 40-cell grid)
  plus one dilated context conv that widens the receptive field without
  further downsampling,
* anchor head: 3x3 conv + 1x1 objectness/regression heads over a fixed
  (w, h) anchor list,
* region head: box-wise average pooling of the region and of a 2x context
  window -> one fully connected layer -> softmax over K+1 classes plus
  class-agnostic box refinement.

``train_forward`` returns a differentiable step graph so callers can add
their own loss terms before the single backward pass; ``train_step`` is the
one-call supervised wrapper.  All stochastic choices (anchor/ROI sampling)
come from an explicit seed, and inference is seed-free, so every operation
is reproducible bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ContractViolationError
from .geometry import Box, Detection, DetectionSet, iou_matrix, nms_indices
from .labelspace import Annotation, Taxonomy, one_hot

DEFAULT_ANCHORS = (
    (64, 20),
    (104, 24),
    (136, 48),
    (136, 88),
    (136, 128),
    (200, 32),
    (256, 56),
    (256, 96),
    (256, 136),
)


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 320
    num_categories: int = 4
    channels: tuple = (16, 32, 64)
    anchors: tuple = DEFAULT_ANCHORS
    rpn_pos_iou: float = 0.5
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 96
    rpn_pos_fraction: float = 0.5
    pre_nms_top: int = 240
    post_nms_top: int = 64
    proposal_nms_iou: float = 0.7
    proposal_min_size: float = 8.0
    roi_batch: int = 64
    roi_pos_fraction: float = 0.5
    roi_pos_iou: float = 0.5
    roi_pool: int = 4
    bbox_beta: float = 0.1
    score_floor: float = 0.05
    max_detections: int = 100
    infer_nms_iou: float = 0.5
    dtype: str = "float32"

    @property
    def stride(self) -> int:
        return 2 ** len(self.channels)

    @property
    def feature_dim(self) -> int:
        # Pooled image features and region features share this dimension.
        return self.channels[-1]

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def config_hash(config: DetectorConfig) -> str:
    blob = json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


class ModelParameters:
    """Named, shape-tagged map of detector weights; the unit of EMA averaging."""

    def __init__(self, arrays: dict):
        self._arrays = {}
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if not np.all(np.isfinite(arr)):
                raise ContractViolationError(f"parameter {name!r} contains non-finite values")
            self._arrays[str(name)] = arr.copy()

    def names(self) -> tuple:
        return tuple(self._arrays.keys())

    def schema(self) -> tuple:
        return tuple((n, a.shape, str(a.dtype)) for n, a in sorted(self._arrays.items()))

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._arrays:
            raise KeyError(f"parameter name set is fixed; unknown name {name!r}")
        value = np.asarray(value, dtype=self._arrays[name].dtype)
        if value.shape != self._arrays[name].shape:
            raise ContractViolationError(
                f"shape mismatch for {name!r}: {value.shape} vs {self._arrays[name].shape}"
            )
        self._arrays[name] = value

    def items(self):
        return self._arrays.items()

    def __contains__(self, name) -> bool:
        return name in self._arrays

    def clone(self) -> "ModelParameters":
        return ModelParameters(self._arrays)

    def allclose(self, other: "ModelParameters", atol: float = 0.0) -> bool:
        if self.schema() != other.schema():
            return False
        return all(np.allclose(a, other[n], atol=atol, rtol=0.0) for n, a in self.items())

    def equal(self, other: "ModelParameters") -> bool:
        if self.schema() != other.schema():
            return False
        return all(np.array_equal(a, other[n]) for n, a in self.items())


def clone_params(params: ModelParameters) -> ModelParameters:
    return params.clone()


def init_params(config: DetectorConfig, seed: int) -> ModelParameters:
    """He-style random initialization; deterministic in (config, seed)."""
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    dt = config.np_dtype
    c1, c2, c3 = config.channels
    a = len(config.anchors)
    k = config.num_categories
    fc_in = 2 * c3 * config.roi_pool * config.roi_pool  # box + 2x context pooling

    def conv_w(c_out, c_in, ksize):
        fan_in = c_in * ksize * ksize
        return (rng.standard_normal((c_out, c_in, ksize, ksize)) * np.sqrt(2.0 / fan_in)).astype(dt)

    def fc_w(n_in, n_out, scale=None):
        s = np.sqrt(2.0 / n_in) if scale is None else scale
        return (rng.standard_normal((n_in, n_out)) * s).astype(dt)

    arrays = {
        "backbone.conv1.w": conv_w(c1, 3, 3),
        "backbone.conv1.b": np.zeros(c1, dtype=dt),
        "backbone.conv2.w": conv_w(c2, c1, 3),
        "backbone.conv2.b": np.zeros(c2, dtype=dt),
        "backbone.conv3.w": conv_w(c3, c2, 3),
        "backbone.conv3.b": np.zeros(c3, dtype=dt),
        "backbone.conv4.w": conv_w(c3, c3, 3),
        "backbone.conv4.b": np.zeros(c3, dtype=dt),
        "rpn.conv.w": conv_w(c3, c3, 3),
        "rpn.conv.b": np.zeros(c3, dtype=dt),
        "rpn.obj.w": conv_w(a, c3, 1) * 0.1,
        # Objectness prior starts low so an untrained model stays quiet.
        "rpn.obj.b": np.full(a, -2.0, dtype=dt),
        "rpn.box.w": conv_w(4 * a, c3, 1) * 0.1,
        "rpn.box.b": np.zeros(4 * a, dtype=dt),
        "roi.fc.w": fc_w(fc_in, c3),
        "roi.fc.b": np.zeros(c3, dtype=dt),
        "roi.cls.w": fc_w(c3, k + 1, scale=0.01),
        "roi.cls.b": np.zeros(k + 1, dtype=dt),
        "roi.box.w": fc_w(c3, 4, scale=0.01),
        "roi.box.b": np.zeros(4, dtype=dt),
    }
    return ModelParameters(arrays)


# -- anchors and box transforms -----------------------------------------------

_ANCHOR_CACHE: dict = {}


def anchor_grid(config: DetectorConfig, hf: int, wf: int) -> np.ndarray:
    """All anchors as (A*hf*wf, 4) corners, ordered (anchor, row, col) C-style."""
    key = (config.anchors, config.stride, hf, wf)
    if key not in _ANCHOR_CACHE:
        stride = config.stride
        cy = (np.arange(hf) + 0.5) * stride
        cx = (np.arange(wf) + 0.5) * stride
        out = np.zeros((len(config.anchors), hf, wf, 4), dtype=np.float64)
        for ai, (w, h) in enumerate(config.anchors):
            out[ai, :, :, 0] = cx[None, :] - w / 2.0
            out[ai, :, :, 1] = cy[:, None] - h / 2.0
            out[ai, :, :, 2] = cx[None, :] + w / 2.0
            out[ai, :, :, 3] = cy[:, None] + h / 2.0
        _ANCHOR_CACHE[key] = out.reshape(-1, 4)
    return _ANCHOR_CACHE[key]


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """(dx, dy, dw, dh) regression targets of ``boxes`` relative to ``anchors``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    bw = np.maximum(boxes[:, 2] - boxes[:, 0], 1e-3)
    bh = np.maximum(boxes[:, 3] - boxes[:, 1], 1e-3)
    bcx = boxes[:, 0] + 0.5 * bw
    bcy = boxes[:, 1] + 0.5 * bh
    return np.stack(
        [(bcx - acx) / aw, (bcy - acy) / ah, np.log(bw / aw), np.log(bh / ah)], axis=1
    )


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(np.clip(deltas[:, 2], -4.0, 4.0))
    h = ah * np.exp(np.clip(deltas[:, 3], -4.0, 4.0))
    return np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)


def _clip_boxes(boxes: np.ndarray, size: int) -> np.ndarray:
    return np.clip(boxes, 0.0, float(size))


# -- forward pieces -----------------------------------------------------------


def prepare_image(image: np.ndarray, config: DetectorConfig) -> np.ndarray:
    """Coerce a (H,W) or (C,H,W) page into the configured (3,H,W) input.

    Pixels are mapped to ink space (1 - value) and the per-page background
    estimate (the median, since pages are mostly empty) is subtracted, so
    activations stay sparse regardless of the page's base gray level.
    """
    arr = np.asarray(image, dtype=config.np_dtype)
    if arr.ndim == 2:
        arr = np.broadcast_to(arr, (3,) + arr.shape).copy()
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ContractViolationError(f"expected (H,W) or (3,H,W) image, got shape {arr.shape}")
    s = config.input_size
    if arr.shape[1] != s or arr.shape[2] != s:
        raise ContractViolationError(f"image size {arr.shape[1:]} does not match configured {s}x{s}")
    ink = np.asarray(1.0, dtype=config.np_dtype) - arr
    return ink - np.median(ink)


def _bind(params: ModelParameters, requires_grad: bool) -> dict:
    # Tensors share the parameter arrays; the optimizer rebinds (never mutates
    # in place), so sharing is safe.
    return {n: Tensor(a, requires_grad=requires_grad) for n, a in params.items()}


def _backbone(pt: dict, x: Tensor) -> Tensor:
    h = ad.conv2d(x, pt["backbone.conv1.w"], pt["backbone.conv1.b"], stride=2, pad=1).relu()
    h = ad.conv2d(h, pt["backbone.conv2.w"], pt["backbone.conv2.b"], stride=2, pad=1).relu()
    h = ad.conv2d(h, pt["backbone.conv3.w"], pt["backbone.conv3.b"], stride=2, pad=1).relu()
    # dilated context stage: grows the receptive field without another
    # downsampling step, so region features can tell whole elements from
    # fragments of self-similar texture
    return ad.conv2d(h, pt["backbone.conv4.w"], pt["backbone.conv4.b"], stride=1, pad=4, dilation=4).relu()


def _rpn_head(pt: dict, fmap: Tensor):
    h = ad.conv2d(fmap, pt["rpn.conv.w"], pt["rpn.conv.b"], stride=1, pad=1).relu()
    obj = ad.conv2d(h, pt["rpn.obj.w"], pt["rpn.obj.b"], stride=1, pad=0)
    deltas = ad.conv2d(h, pt["rpn.box.w"], pt["rpn.box.b"], stride=1, pad=0)
    return obj, deltas


def _roi_bins(boxes: np.ndarray, out_size: int, scale: float, hf: int, wf: int):
    """Integer pooling bins per box; shared by the Tensor op's numpy twin."""
    bins = []
    for x0, y0, x1, y1 in np.asarray(boxes, dtype=np.float64).reshape(-1, 4) * scale:
        x0 = min(max(x0, 0.0), wf - 1.0)
        y0 = min(max(y0, 0.0), hf - 1.0)
        x1 = min(max(x1, x0 + 1e-3), float(wf))
        y1 = min(max(y1, y0 + 1e-3), float(hf))
        xs = np.linspace(x0, x1, out_size + 1)
        ys = np.linspace(y0, y1, out_size + 1)
        row = []
        for pi in range(out_size):
            r0 = int(np.floor(ys[pi]))
            r1 = min(max(r0 + 1, int(np.ceil(ys[pi + 1]))), hf)
            r0 = min(r0, r1 - 1)
            for pj in range(out_size):
                c0 = int(np.floor(xs[pj]))
                c1 = min(max(c0 + 1, int(np.ceil(xs[pj + 1]))), wf)
                c0 = min(c0, c1 - 1)
                row.append((r0, r1, c0, c1))
        bins.append(row)
    return bins


def _roi_pool_np(fmap: np.ndarray, boxes: np.ndarray, out_size: int, scale: float) -> np.ndarray:
    c, hf, wf = fmap.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = np.zeros((boxes.shape[0], c, out_size, out_size), dtype=fmap.dtype)
    for i, row in enumerate(_roi_bins(boxes, out_size, scale, hf, wf)):
        for flat, (r0, r1, c0, c1) in enumerate(row):
            pi, pj = divmod(flat, out_size)
            out[i, :, pi, pj] = fmap[:, r0:r1, c0:c1].mean(axis=(1, 2))
    return out


def _expand_boxes(boxes: np.ndarray, size: int, factor: float = 2.0) -> np.ndarray:
    """Center-preserving box expansion, clipped to the page."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    cx = (boxes[:, 0] + boxes[:, 2]) / 2.0
    cy = (boxes[:, 1] + boxes[:, 3]) / 2.0
    w = (boxes[:, 2] - boxes[:, 0]) * factor / 2.0
    h = (boxes[:, 3] - boxes[:, 1]) * factor / 2.0
    out = np.stack([cx - w, cy - h, cx + w, cy + h], axis=1)
    return _clip_boxes(out, size)


def _roi_head(pt: dict, fmap: Tensor, rois: np.ndarray, config: DetectorConfig):
    n = rois.shape[0]
    pooled = ad.roi_avg_pool(fmap, rois, config.roi_pool, 1.0 / config.stride)
    context = ad.roi_avg_pool(
        fmap, _expand_boxes(rois, config.input_size), config.roi_pool, 1.0 / config.stride
    )
    flat = pooled.reshape(n, -1)
    flat_ctx = context.reshape(n, -1)
    joined_data = np.concatenate([flat.data, flat_ctx.data], axis=1)
    joined = Tensor(joined_data, _parents=(flat, flat_ctx))
    half = flat.data.shape[1]

    def bw(g):
        flat._accumulate(g[:, :half])
        flat_ctx._accumulate(g[:, half:])

    joined._backward = bw
    hidden = (joined @ pt["roi.fc.w"] + pt["roi.fc.b"]).relu()
    cls_logits = hidden @ pt["roi.cls.w"] + pt["roi.cls.b"]
    box_deltas = hidden @ pt["roi.box.w"] + pt["roi.box.b"]
    return cls_logits, box_deltas, hidden


def _roi_head_np(params: ModelParameters, fmap: np.ndarray, rois: np.ndarray, config: DetectorConfig):
    pooled = _roi_pool_np(fmap, rois, config.roi_pool, 1.0 / config.stride)
    context = _roi_pool_np(
        fmap, _expand_boxes(rois, config.input_size), config.roi_pool, 1.0 / config.stride
    )
    n = rois.shape[0]
    flat = np.concatenate([pooled.reshape(n, -1), context.reshape(n, -1)], axis=1)
    hidden = np.maximum(flat @ params["roi.fc.w"] + params["roi.fc.b"], 0.0)
    cls_logits = hidden @ params["roi.cls.w"] + params["roi.cls.b"]
    box_deltas = hidden @ params["roi.box.w"] + params["roi.box.b"]
    return cls_logits, box_deltas, hidden


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _make_proposals(obj: np.ndarray, deltas: np.ndarray, config: DetectorConfig) -> np.ndarray:
    """Decode, clip, and NMS-filter anchor predictions into ROI candidates."""
    a, hf, wf = obj.shape
    anchors = anchor_grid(config, hf, wf)
    scores = _sigmoid(obj.astype(np.float64).ravel())
    d = deltas.astype(np.float64).reshape(a, 4, hf, wf).transpose(0, 2, 3, 1).reshape(-1, 4)
    boxes = _clip_boxes(decode_boxes(anchors, d), config.input_size)
    wide = (boxes[:, 2] - boxes[:, 0]) >= config.proposal_min_size
    tall = (boxes[:, 3] - boxes[:, 1]) >= config.proposal_min_size
    keep = np.nonzero(wide & tall)[0]
    if keep.size == 0:
        return np.zeros((0, 4), dtype=np.float64)
    order = keep[np.argsort(-scores[keep], kind="stable")][: config.pre_nms_top]
    kept = nms_indices(boxes[order], scores[order], config.proposal_nms_iou)
    return boxes[order[kept[: config.post_nms_top]]]


# -- inference ----------------------------------------------------------------


@dataclass(frozen=True)
class FeatureEmbedding:
    """Per-image pooled vector (D,) plus per-detection region vectors (N, D)."""

    pooled: np.ndarray
    regions: np.ndarray


@dataclass(frozen=True)
class InferenceResult:
    detections: DetectionSet
    features: FeatureEmbedding


@dataclass
class InferContext:
    """Cached forward pass of one image; lets callers pool extra regions cheaply."""

    config: DetectorConfig
    params: ModelParameters
    fmap: np.ndarray
    obj: np.ndarray
    deltas: np.ndarray

    @property
    def pooled(self) -> np.ndarray:
        return self.fmap.mean(axis=(1, 2))


def forward_context(params: ModelParameters, image: np.ndarray, config: DetectorConfig) -> InferContext:
    x = Tensor(prepare_image(image, config))
    pt = _bind(params, requires_grad=False)
    fmap = _backbone(pt, x)
    obj, deltas = _rpn_head(pt, fmap)
    return InferContext(config, params, fmap.data, obj.data, deltas.data)


def region_features(ctx: InferContext, boxes: np.ndarray) -> np.ndarray:
    """Region feature vectors (M, D) pooled at arbitrary image-coordinate boxes."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] == 0:
        return np.zeros((0, ctx.config.feature_dim), dtype=ctx.fmap.dtype)
    _, _, hidden = _roi_head_np(ctx.params, ctx.fmap, boxes, ctx.config)
    return hidden


def detect_in_context(ctx: InferContext, image_id=None) -> InferenceResult:
    config = ctx.config
    rois = _make_proposals(ctx.obj, ctx.deltas, config)
    if rois.shape[0] == 0:
        return InferenceResult(
            DetectionSet((), image_id),
            FeatureEmbedding(ctx.pooled, np.zeros((0, config.feature_dim), dtype=ctx.fmap.dtype)),
        )
    cls_logits, box_deltas, hidden = _roi_head_np(ctx.params, ctx.fmap, rois, config)
    probs = _softmax_np(cls_logits.astype(np.float64))
    fg = probs[:, 1:]
    cats = fg.argmax(axis=1)
    scores = fg[np.arange(len(cats)), cats]
    boxes = _clip_boxes(decode_boxes(rois, box_deltas), config.input_size)
    idx = np.nonzero(scores >= config.score_floor)[0]
    kept = nms_indices(boxes[idx], scores[idx], config.infer_nms_iou, categories=cats[idx])
    rows = idx[kept][: config.max_detections]  # nms_indices order is descending score
    detections = tuple(
        Detection(Box(*boxes[r]), int(cats[r]), float(min(scores[r], 1.0)), fg[r] / fg[r].sum())
        for r in rows
    )
    regions = (
        hidden[rows]
        if len(rows)
        else np.zeros((0, config.feature_dim), dtype=ctx.fmap.dtype)
    )
    return InferenceResult(DetectionSet(detections, image_id), FeatureEmbedding(ctx.pooled, regions))


def infer(params: ModelParameters, image: np.ndarray, config: DetectorConfig, image_id=None) -> InferenceResult:
    """Detect layout elements on one image; deterministic in (params, image)."""
    return detect_in_context(forward_context(params, image, config), image_id)


# -- training -----------------------------------------------------------------


def _coerce_targets(targets, num_categories: int):
    """Normalize ground truth / pseudo labels to (boxes, categories, soft rows)."""
    if targets is None:
        items = []
    elif isinstance(targets, DetectionSet):
        items = [(d.box, d.category, d.soft_label) for d in targets]
    elif hasattr(targets, "detections"):  # PseudoLabelSet-shaped
        items = [(d.box, d.category, d.soft_label) for d in targets.detections]
    else:
        items = []
        for entry in targets:
            if isinstance(entry, Annotation):
                items.append((entry.box, entry.category_id, None))
            elif isinstance(entry, Detection):
                items.append((entry.box, entry.category, entry.soft_label))
            else:
                box, cat = entry
                items.append((box, int(cat), None))
    n = len(items)
    boxes = np.zeros((n, 4), dtype=np.float64)
    cats = np.zeros(n, dtype=np.int64)
    soft = np.zeros((n, num_categories), dtype=np.float64)
    for i, (box, cat, row) in enumerate(items):
        boxes[i] = box.as_array() if isinstance(box, Box) else np.asarray(box, dtype=np.float64)
        cats[i] = int(cat)
        soft[i] = one_hot(cats[i], num_categories) if row is None else np.asarray(row, dtype=np.float64)
    if n and (cats.min() < 0 or cats.max() >= num_categories):
        raise ContractViolationError("target category outside the configured label space")
    return boxes, cats, soft


@dataclass
class StepFeatures:
    """Gradient-carrying analogue of FeatureEmbedding for the training pass."""

    pooled: Tensor
    regions: Tensor


@dataclass
class TrainStepOutput:
    """Differentiable step graph: the four detection losses plus soft outputs/features.

    ``backward(total)`` runs one reverse pass and returns name->gradient
    arrays; ``train_step`` calls it with the plain detection loss, while the
    adaptation loop composes the full weighted objective first.
    """

    loss_rpn_cls: Tensor
    loss_rpn_reg: Tensor
    loss_roi_cls: Tensor
    loss_roi_reg: Tensor
    soft_outputs: Tensor
    matched_target_indices: np.ndarray
    features: StepFeatures
    rois: np.ndarray
    param_tensors: dict
    target_count: int
    gradients: dict | None = None

    def detection_loss(self) -> Tensor:
        return self.loss_rpn_cls + self.loss_rpn_reg + self.loss_roi_cls + self.loss_roi_reg

    def loss_values(self) -> dict:
        return {
            "rpn_cls": self.loss_rpn_cls.item(),
            "rpn_reg": self.loss_rpn_reg.item(),
            "roi_cls": self.loss_roi_cls.item(),
            "roi_reg": self.loss_roi_reg.item(),
        }

    def backward(self, total: Tensor) -> dict:
        if not np.isfinite(total.data):
            raise ContractViolationError("cannot backpropagate a non-finite loss")
        total.backward()
        grads = {}
        for name, t in self.param_tensors.items():
            grads[name] = np.zeros_like(t.data) if t.grad is None else t.grad
        self.gradients = grads
        return grads


def _ignore_mask(boxes: np.ndarray, ignore_boxes, threshold: float = 0.3) -> np.ndarray:
    """True where a box overlaps an ignore region enough to be unusable as a negative."""
    if ignore_boxes is None or np.size(ignore_boxes) == 0:
        return np.zeros(boxes.shape[0], dtype=bool)
    return iou_matrix(boxes, ignore_boxes).max(axis=1) >= threshold


def _assign_rpn(anchors: np.ndarray, gt_boxes: np.ndarray, config: DetectorConfig, rng, ignore_boxes=None):
    n_anchor = anchors.shape[0]
    batch = min(config.rpn_batch, n_anchor)
    banned = _ignore_mask(anchors, ignore_boxes)
    if gt_boxes.shape[0] == 0:
        allowed = np.nonzero(~banned)[0]
        if len(allowed) == 0:
            allowed = np.arange(n_anchor)  # degenerate page fully covered by ignores
        idx = rng.choice(allowed, size=min(batch, len(allowed)), replace=False)
        idx.sort()
        return idx, np.zeros(len(idx)), np.zeros(0, dtype=np.int64), np.zeros((0, 4))
    mat = iou_matrix(anchors, gt_boxes)
    best = mat.max(axis=1)
    best_gt = mat.argmax(axis=1)
    pos = best >= config.rpn_pos_iou
    forced = mat.argmax(axis=0)
    for gi, ai in enumerate(forced):
        if mat[ai, gi] > 0.0:
            pos[ai] = True
            best_gt[ai] = gi
    neg = (best < config.rpn_neg_iou) & ~pos & ~banned
    pos_idx = np.nonzero(pos)[0]
    neg_idx = np.nonzero(neg)[0]
    n_pos = min(len(pos_idx), int(round(batch * config.rpn_pos_fraction)))
    chosen_pos = rng.choice(pos_idx, size=n_pos, replace=False) if n_pos else np.zeros(0, dtype=np.int64)
    n_neg = min(len(neg_idx), batch - n_pos)
    chosen_neg = rng.choice(neg_idx, size=n_neg, replace=False) if n_neg else np.zeros(0, dtype=np.int64)
    chosen_pos.sort()
    chosen_neg.sort()
    idx = np.concatenate([chosen_pos, chosen_neg])
    labels = np.concatenate([np.ones(len(chosen_pos)), np.zeros(len(chosen_neg))])
    reg_targets = encode_boxes(gt_boxes[best_gt[chosen_pos]], anchors[chosen_pos]) if n_pos else np.zeros((0, 4))
    return idx, labels, chosen_pos, reg_targets


def _sample_rois(proposals, gt_boxes, gt_cats, config, rng, ignore_boxes=None):
    candidates = np.concatenate([proposals, gt_boxes], axis=0) if gt_boxes.size else proposals
    if candidates.shape[0] == 0:
        candidates = np.array([[0.0, 0.0, config.input_size, config.input_size]])
    n = candidates.shape[0]
    banned = _ignore_mask(candidates, ignore_boxes)
    if gt_boxes.shape[0] == 0:
        allowed = np.nonzero(~banned)[0]
        if len(allowed) == 0:
            allowed = np.arange(n)  # degenerate page fully covered by ignores
        take = min(config.roi_batch, len(allowed))
        idx = rng.choice(allowed, size=take, replace=False)
        idx.sort()
        rois = candidates[idx]
        return rois, np.zeros(take, dtype=np.int64), np.zeros(take, dtype=np.int64) - 1, np.zeros((0, 4))
    mat = iou_matrix(candidates, gt_boxes)
    best = mat.max(axis=1)
    assigned = mat.argmax(axis=1)
    fg = best >= config.roi_pos_iou
    fg_idx = np.nonzero(fg)[0]
    bg_idx = np.nonzero(~fg & ~banned)[0]
    n_fg = min(len(fg_idx), int(round(config.roi_batch * config.roi_pos_fraction)))
    chosen_fg = rng.choice(fg_idx, size=n_fg, replace=False) if n_fg else np.zeros(0, dtype=np.int64)
    n_bg = min(len(bg_idx), config.roi_batch - n_fg)
    chosen_bg = rng.choice(bg_idx, size=n_bg, replace=False) if n_bg else np.zeros(0, dtype=np.int64)
    chosen_fg.sort()
    chosen_bg.sort()
    idx = np.concatenate([chosen_fg, chosen_bg])
    rois = candidates[idx]
    labels = np.zeros(len(idx), dtype=np.int64)
    labels[: len(chosen_fg)] = gt_cats[assigned[chosen_fg]] + 1
    matched = np.full(len(idx), -1, dtype=np.int64)
    matched[: len(chosen_fg)] = assigned[chosen_fg]
    reg_targets = (
        encode_boxes(gt_boxes[assigned[chosen_fg]], candidates[chosen_fg])
        if n_fg
        else np.zeros((0, 4))
    )
    return rois, labels, matched, reg_targets


def train_forward(
    params: ModelParameters,
    image: np.ndarray,
    targets,
    config: DetectorConfig,
    seed: int = 0,
    frozen_rois: np.ndarray | None = None,
) -> TrainStepOutput:
    """Run one differentiable training pass against (pseudo) targets.

    Sampling of anchors and ROIs is driven entirely by ``seed``.  Passing
    ``frozen_rois`` pins the ROI set (used by gradient checks, where the
    proposal selection must not move under parameter perturbation).
    """
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    gt_boxes, gt_cats, _ = _coerce_targets(targets, config.num_categories)
    ignore_boxes = getattr(targets, "ignore_boxes", None)
    x = Tensor(prepare_image(image, config))
    pt = _bind(params, requires_grad=True)
    fmap = _backbone(pt, x)
    obj, deltas = _rpn_head(pt, fmap)
    a, hf, wf = obj.data.shape
    anchors = anchor_grid(config, hf, wf)

    idx, labels, pos_rows, rpn_reg_targets = _assign_rpn(anchors, gt_boxes, config, rng, ignore_boxes)
    obj_flat = obj.reshape(-1)
    if len(idx):
        loss_rpn_cls = ad.bce_with_logits(obj_flat[idx], labels)
    else:
        loss_rpn_cls = Tensor(np.asarray(0.0, dtype=config.np_dtype))
    deltas_rows = deltas.reshape(a, 4, hf, wf).transpose(0, 2, 3, 1).reshape(-1, 4)
    if len(pos_rows):
        loss_rpn_reg = ad.smooth_l1(deltas_rows[pos_rows], rpn_reg_targets, beta=config.bbox_beta)
    else:
        loss_rpn_reg = Tensor(np.asarray(0.0, dtype=config.np_dtype))

    if frozen_rois is not None:
        proposals = np.asarray(frozen_rois, dtype=np.float64).reshape(-1, 4)
        rois, labels_roi, matched, roi_reg_targets = _sample_rois(
            proposals, gt_boxes, gt_cats, replace(config, roi_batch=len(proposals) + len(gt_boxes)),
            rng, ignore_boxes,
        )
    else:
        proposals = _make_proposals(obj.data, deltas.data, config)
        rois, labels_roi, matched, roi_reg_targets = _sample_rois(
            proposals, gt_boxes, gt_cats, config, rng, ignore_boxes
        )

    cls_logits, box_deltas, _ = _roi_head(pt, fmap, rois, config)
    log_probs = ad.log_softmax(cls_logits, axis=1)
    loss_roi_cls = -(log_probs[np.arange(len(labels_roi)), labels_roi].mean())
    fg_rows = np.nonzero(labels_roi > 0)[0]
    if len(fg_rows):
        loss_roi_reg = ad.smooth_l1(box_deltas[fg_rows], roi_reg_targets, beta=config.bbox_beta)
        fg_logits = cls_logits[fg_rows]
        soft_outputs = ad.softmax(fg_logits[:, 1 : config.num_categories + 1], axis=1)
        matched_idx = matched[fg_rows]
    else:
        loss_roi_reg = Tensor(np.asarray(0.0, dtype=config.np_dtype))
        soft_outputs = Tensor(np.zeros((0, config.num_categories), dtype=config.np_dtype))
        matched_idx = np.zeros(0, dtype=np.int64)

    if gt_boxes.shape[0]:
        _, _, region_hidden = _roi_head(pt, fmap, gt_boxes, config)
    else:
        region_hidden = Tensor(np.zeros((0, config.feature_dim), dtype=config.np_dtype))
    features = StepFeatures(pooled=fmap.mean(axis=(1, 2)), regions=region_hidden)

    return TrainStepOutput(
        loss_rpn_cls=loss_rpn_cls,
        loss_rpn_reg=loss_rpn_reg,
        loss_roi_cls=loss_roi_cls,
        loss_roi_reg=loss_roi_reg,
        soft_outputs=soft_outputs,
        matched_target_indices=matched_idx,
        features=features,
        rois=rois,
        param_tensors=pt,
        target_count=int(gt_boxes.shape[0]),
    )


def train_step(params, image, targets, config: DetectorConfig, seed: int = 0) -> TrainStepOutput:
    """Supervised step: detection losses only, gradients accumulated."""
    out = train_forward(params, image, targets, config, seed=seed)
    out.backward(out.detection_loss())
    return out


# -- checkpoints ----------------------------------------------------------------

_CKPT_MAGIC = b"DOCADAPT.CKPT.1\n"


@dataclass
class Checkpoint:
    """Self-describing training state: weights, counters, taxonomy, config."""

    params: ModelParameters
    config: DetectorConfig
    taxonomy: Taxonomy
    iteration: int = 0
    epoch: int = 0


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write a checkpoint with deterministic bytes (bit-exact round-trips)."""
    tensors = []
    payload = bytearray()
    for name in sorted(ckpt.params.names()):
        arr = np.ascontiguousarray(ckpt.params[name])
        raw = arr.tobytes()
        tensors.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    header = {
        "config": asdict(ckpt.config),
        "config_hash": config_hash(ckpt.config),
        "iteration": int(ckpt.iteration),
        "epoch": int(ckpt.epoch),
        "taxonomy": {"name": ckpt.taxonomy.name, "categories": list(ckpt.taxonomy.categories)},
        "tensors": tensors,
        "payload_nbytes": len(payload),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not data.startswith(_CKPT_MAGIC):
        raise CheckpointError(f"{path} is not a compatible checkpoint (bad magic)")
    off = len(_CKPT_MAGIC)
    if len(data) < off + 8:
        raise CheckpointError(f"{path} is truncated (no header length)")
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    if len(data) < off + hlen:
        raise CheckpointError(f"{path} is truncated (incomplete header)")
    try:
        header = json.loads(data[off : off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from exc
    off += hlen
    payload = data[off:]
    if len(payload) != header.get("payload_nbytes", -1):
        raise CheckpointError(
            f"{path} is truncated: payload {len(payload)} bytes, "
            f"expected {header.get('payload_nbytes')}"
        )
    arrays = {}
    for spec in header["tensors"]:
        start = spec["offset"]
        raw = payload[start : start + spec["nbytes"]]
        arrays[spec["name"]] = np.frombuffer(raw, dtype=np.dtype(spec["dtype"])).reshape(spec["shape"]).copy()
    cfg_dict = dict(header["config"])
    for key in ("channels", "anchors"):
        cfg_dict[key] = tuple(tuple(v) if isinstance(v, list) else v for v in cfg_dict[key])
    config = DetectorConfig(**cfg_dict)
    taxonomy = Taxonomy(header["taxonomy"]["name"], tuple(header["taxonomy"]["categories"]))
    return Checkpoint(
        params=ModelParameters(arrays),
        config=config,
        taxonomy=taxonomy,
        iteration=header["iteration"],
        epoch=header["epoch"],
    )

"""Axis-aligned box arithmetic: IoU, greedy matching, non-maximum suppression.

These are the deterministic kernels under pseudo-label fusion and mAP
evaluation.  Coordinates are continuous page pixels, origin top-left; box
area is (x_max - x_min) * (y_max - y_min) with no "+1" convention.  All
operations are pure functions over immutable inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle with x_min <= x_max and y_min <= y_max."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"box must satisfy x_min <= x_max and y_min <= y_max, got {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Detection:
    """One predicted layout element: box, category id, confidence, soft class distribution."""

    box: Box
    category: int
    score: float
    soft_label: np.ndarray

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        soft = np.asarray(self.soft_label, dtype=np.float64)
        if soft.ndim != 1:
            raise ValueError(f"soft_label must be a 1-D probability vector, got shape {soft.shape}")
        if np.any(soft < -1e-9):
            raise ValueError("soft_label entries must be non-negative")
        total = float(soft.sum())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"soft_label must sum to 1 within 1e-6, got {total}")
        if not (0 <= self.category < soft.shape[0]):
            raise ValueError(f"category {self.category} outside soft_label dimension {soft.shape[0]}")
        soft = np.clip(soft, 0.0, None)
        soft.setflags(write=False)
        object.__setattr__(self, "soft_label", soft)
        object.__setattr__(self, "category", int(self.category))
        object.__setattr__(self, "score", float(self.score))


@dataclass(frozen=True)
class DetectionSet:
    """Detections for one image.  ``sorted_by_score`` yields descending-score order."""

    detections: tuple = field(default_factory=tuple)
    image_id: object = None

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))

    def __len__(self) -> int:
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)

    def __getitem__(self, i) -> Detection:
        return self.detections[i]

    def sorted_by_score(self) -> "DetectionSet":
        order = descending_score_order([d.score for d in self.detections])
        return DetectionSet(tuple(self.detections[i] for i in order), self.image_id)

    def boxes_array(self) -> np.ndarray:
        if not self.detections:
            return np.zeros((0, 4), dtype=np.float64)
        return np.stack([d.box.as_array() for d in self.detections])

    def scores_array(self) -> np.ndarray:
        return np.array([d.score for d in self.detections], dtype=np.float64)

    def categories_array(self) -> np.ndarray:
        return np.array([d.category for d in self.detections], dtype=np.int64)

    def soft_labels_array(self, num_categories: int | None = None) -> np.ndarray:
        if not self.detections:
            k = 0 if num_categories is None else num_categories
            return np.zeros((0, k), dtype=np.float64)
        return np.stack([d.soft_label for d in self.detections])


def descending_score_order(scores) -> np.ndarray:
    """Indices sorting scores descending; equal scores keep their original order."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0.0 when the union has zero area."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        inter = 0.0
    else:
        inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N,4) and (M,4) corner-form boxes."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(boxes_a[:, None, 2], boxes_b[None, :, 2]) - np.maximum(
        boxes_a[:, None, 0], boxes_b[None, :, 0]
    )
    iy = np.minimum(boxes_a[:, None, 3], boxes_b[None, :, 3]) - np.maximum(
        boxes_a[:, None, 1], boxes_b[None, :, 1]
    )
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def nms_indices(
    boxes: np.ndarray,
    scores: np.ndarray,
    iou_threshold: float,
    categories: np.ndarray | None = None,
) -> list:
    """Indices surviving greedy NMS, in descending-score (kept) order.

    A box is suppressed when its IoU with an already-kept box exceeds
    ``iou_threshold``; with ``categories`` given, suppression applies only
    within a category.  Equal scores break ties toward the lower index.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] == 0:
        return []
    mat = iou_matrix(boxes, boxes)
    kept: list[int] = []
    for i in descending_score_order(scores):
        suppressed = False
        for j in kept:
            if categories is not None and categories[i] != categories[j]:
                continue
            if mat[i, j] > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(int(i))
    return kept


def nms(dets: DetectionSet, iou_threshold: float, per_category: bool = True) -> DetectionSet:
    """Greedy non-maximum suppression in descending-score order.

    A detection is suppressed when its IoU with an already-kept detection
    exceeds ``iou_threshold`` (and, with ``per_category``, only when the two
    share a category).  Equal scores break ties toward the lower original
    index.  The result is sorted descending by score.
    """
    if not (0.0 < iou_threshold < 1.0):
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    if len(dets) == 0:
        return DetectionSet((), dets.image_id)
    kept = nms_indices(
        dets.boxes_array(),
        dets.scores_array(),
        iou_threshold,
        dets.categories_array() if per_category else None,
    )
    return DetectionSet(tuple(dets[i] for i in kept), dets.image_id)


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple          # (src_index, ref_index) pairs
    unmatched_src: tuple
    unmatched_ref: tuple


def match_greedy(
    src: DetectionSet,
    ref: DetectionSet,
    iou_threshold: float,
    require_same_category: bool = True,
) -> MatchResult:
    """One-to-one greedy matching of ``src`` detections onto ``ref`` detections.

    Source detections are processed in descending score (ties toward lower
    index); each takes the highest-IoU unconsumed reference with
    IoU >= ``iou_threshold``, breaking IoU ties toward the lower ref index.
    """
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    if len(src) == 0 or len(ref) == 0:
        return MatchResult((), tuple(range(len(src))), tuple(range(len(ref))))
    mat = iou_matrix(src.boxes_array(), ref.boxes_array())
    src_cats = src.categories_array()
    ref_cats = ref.categories_array()
    consumed = np.zeros(len(ref), dtype=bool)
    pairs: list[tuple[int, int]] = []
    for i in descending_score_order(src.scores_array()):
        best_j = -1
        best_iou = -1.0
        for j in range(len(ref)):
            if consumed[j]:
                continue
            if require_same_category and src_cats[i] != ref_cats[j]:
                continue
            v = mat[i, j]
            if v >= iou_threshold and v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0:
            consumed[best_j] = True
            pairs.append((int(i), best_j))
    matched_src = {i for i, _ in pairs}
    matched_ref = {j for _, j in pairs}
    return MatchResult(
        tuple(sorted(pairs)),
        tuple(i for i in range(len(src)) if i not in matched_src),
        tuple(j for j in range(len(ref)) if j not in matched_ref),
    )

"""Per-category average precision and mAP@0.5.

Matching protocol (pinned so third-party scorers can reproduce numbers
bit-exactly): predictions of one category are ranked globally by
(-score, image position in the prediction list, insertion index); each is
greedily matched to the not-yet-used same-image ground-truth box with the
highest IoU >= the threshold, preferring the lower GT index on ties.  AP is
the area under the precision-recall curve with all-point (precision
envelope) interpolation.  Categories with zero ground truth are reported as
absent, not zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError
from .geometry import DetectionSet, iou_matrix
from .labelspace import Taxonomy


@dataclass(frozen=True)
class EvalResult:
    per_category_ap: dict  # category name -> AP, only categories with >= 1 GT
    map50: float
    gt_counts: dict        # category name -> GT count

    def ap_of(self, name: str):
        return self.per_category_ap.get(name)


def _gather_category(preds, annotations, category_id: int):
    """All predictions of one category (sorted) and per-image GT boxes."""
    rows = []  # (-score, image_pos, det_idx, image_id, box)
    for image_pos, dset in enumerate(preds):
        for det_idx, det in enumerate(dset):
            if det.category == category_id:
                rows.append((-det.score, image_pos, det_idx, dset.image_id, det.box.as_array()))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    gt_by_image: dict = {}
    for ann in annotations:
        if ann.category_id == category_id:
            gt_by_image.setdefault(ann.image_id, []).append(ann.box.as_array())
    return rows, gt_by_image


def average_precision(preds, annotations, category_id: int, iou_threshold: float = 0.5):
    """AP for one category, or None when the category has no ground truth."""
    rows, gt_by_image = _gather_category(preds, annotations, category_id)
    n_gt = sum(len(v) for v in gt_by_image.values())
    if n_gt == 0:
        return None
    used = {img: np.zeros(len(boxes), dtype=bool) for img, boxes in gt_by_image.items()}
    tp = np.zeros(len(rows))
    for k, (_, _, _, image_id, box) in enumerate(rows):
        boxes = gt_by_image.get(image_id)
        if boxes is None:
            continue
        ious = iou_matrix(box[None, :], np.stack(boxes))[0]
        ious = np.where(used[image_id], -1.0, ious)
        j = int(ious.argmax())  # argmax takes the lowest index on ties
        if ious[j] >= iou_threshold:
            tp[k] = 1.0
            used[image_id][j] = True
    if len(rows) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(rows) + 1)
    return _envelope_area(recall, precision)


def _envelope_area(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under the PR curve."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def map50(preds, annotations, taxonomy: Taxonomy, iou_threshold: float = 0.5) -> EvalResult:
    """Mean AP over the categories that have ground truth."""
    per_cat = {}
    counts = {}
    for cat_id, name in enumerate(taxonomy.categories):
        counts[name] = sum(1 for a in annotations if a.category_id == cat_id)
        ap = average_precision(preds, annotations, cat_id, iou_threshold)
        if ap is not None:
            per_cat[name] = ap
    if not per_cat:
        raise EvaluationError("no category has any ground truth; nothing to evaluate")
    return EvalResult(
        per_category_ap=per_cat,
        map50=float(np.mean(list(per_cat.values()))),
        gt_counts=counts,
    )

"""Fuse static- and dynamic-teacher detections into consensus pseudo-labels.

Detections that both teachers agree on (high IoU, same category) are merged
into a single elevated-confidence pseudo-label; detections only one teacher
produced are kept but down-weighted to reflect uncertainty.  A score
threshold and per-category NMS then clean the set.  ``hard_select`` is the
single-threshold baseline the ablation compares against.

Matching here is a *symmetric* greedy over candidate pairs (sorted by max
score, then min score, then IoU) so that swapping the two argument sets can
never change which consensus labels come out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .geometry import Box, Detection, DetectionSet, iou_matrix, nms

CONSENSUS = "consensus"
STATIC_ONLY = "static_only"
DYNAMIC_ONLY = "dynamic_only"


@dataclass(frozen=True)
class ConsensusConfig:
    match_iou: float = 0.5
    boost: float = 1.1
    penalty: float = 0.5
    # Pseudo-labels only help when they are nearly always right; the floor
    # sits in the high-confidence regime on purpose.
    keep_threshold: float = 0.8
    nms_iou: float = 0.5
    # Teacher detections scoring at least this (raw) that do NOT survive as
    # pseudo-labels become ignore regions: the student is not trained to call
    # them background. 1.0 disables masking (the default; enable with care --
    # a low floor lets low-score noise mask the whole page).
    ignore_floor: float = 1.0
    # Optional per-category score floors overriding keep_threshold.
    keep_threshold_per_category: tuple = ()

    def __post_init__(self):
        if not (0.0 < self.match_iou < 1.0):
            raise ConfigurationError(f"match_iou must lie in (0, 1), got {self.match_iou}")
        if not (self.penalty <= 1.0 <= self.boost):
            raise ConfigurationError("need penalty <= 1 <= boost")
        if not (0.0 < self.keep_threshold < 1.0):
            raise ConfigurationError(f"keep_threshold must lie in (0, 1), got {self.keep_threshold}")
        if not (0.0 < self.nms_iou < 1.0):
            raise ConfigurationError(f"nms_iou must lie in (0, 1), got {self.nms_iou}")
        if not (0.0 <= self.ignore_floor <= 1.0):
            raise ConfigurationError(f"ignore_floor must lie in [0, 1], got {self.ignore_floor}")

    def floor_for(self, category: int) -> float:
        for cat, thr in self.keep_threshold_per_category:
            if cat == category:
                return thr
        return self.keep_threshold


@dataclass(frozen=True)
class PseudoLabelSet:
    """Consensus-fused detections used as surrogate ground truth.

    ``ignore_boxes`` are regions where some teacher saw *something* but not
    confidently enough to supervise; the detector's target assignment skips
    them when sampling negatives.
    """

    detections: DetectionSet
    provenance: tuple  # aligned with detections; CONSENSUS / STATIC_ONLY / DYNAMIC_ONLY
    ignore_boxes: np.ndarray = None

    def __post_init__(self):
        if len(self.provenance) != len(self.detections):
            raise ValueError("provenance must align one-to-one with detections")
        boxes = self.ignore_boxes
        boxes = np.zeros((0, 4)) if boxes is None else np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        boxes.setflags(write=False)
        object.__setattr__(self, "ignore_boxes", boxes)

    def __len__(self) -> int:
        return len(self.detections)

    def boxes_array(self) -> np.ndarray:
        return self.detections.boxes_array()

    def consensus_fraction(self) -> float:
        if not len(self):
            return 0.0
        return sum(1 for p in self.provenance if p == CONSENSUS) / len(self)


def _symmetric_pairs(r_static: DetectionSet, r_dynamic: DetectionSet, match_iou: float):
    """Greedy one-to-one matching over cross pairs, invariant to argument order.

    Candidates (same category, IoU >= match_iou) are consumed in order of
    (max score, min score, IoU) descending, which is a symmetric key.
    """
    if len(r_static) == 0 or len(r_dynamic) == 0:
        return []
    mat = iou_matrix(r_static.boxes_array(), r_dynamic.boxes_array())
    cats_s = r_static.categories_array()
    cats_d = r_dynamic.categories_array()
    candidates = []
    for i in range(len(r_static)):
        for j in range(len(r_dynamic)):
            if cats_s[i] != cats_d[j] or mat[i, j] < match_iou:
                continue
            s_hi = max(r_static[i].score, r_dynamic[j].score)
            s_lo = min(r_static[i].score, r_dynamic[j].score)
            candidates.append((-s_hi, -s_lo, -mat[i, j], i, j))
    candidates.sort()
    used_s: set[int] = set()
    used_d: set[int] = set()
    pairs = []
    for _, _, _, i, j in candidates:
        if i in used_s or j in used_d:
            continue
        used_s.add(i)
        used_d.add(j)
        pairs.append((i, j))
    return pairs


def _fuse_pair(a: Detection, b: Detection, boost: float) -> Detection:
    """Merge two same-category detections: score-weighted box, boosted max score, mean soft label."""
    w = a.score + b.score
    if w > 0:
        coords = (a.score * a.box.as_array() + b.score * b.box.as_array()) / w
    else:
        coords = (a.box.as_array() + b.box.as_array()) / 2.0
    soft = (a.soft_label + b.soft_label) / 2.0
    soft = soft / soft.sum()
    score = min(1.0, boost * max(a.score, b.score))
    return Detection(Box(*coords), a.category, score, soft)


def fuse(r_static: DetectionSet, r_dynamic: DetectionSet, cfg: ConsensusConfig) -> PseudoLabelSet:
    """Consensus pipeline: match -> fuse/penalize -> threshold -> per-category NMS."""
    pairs = _symmetric_pairs(r_static, r_dynamic, cfg.match_iou)
    matched_s = {i for i, _ in pairs}
    matched_d = {j for _, j in pairs}

    labelled: list[tuple[Detection, str]] = []
    for i, j in pairs:
        labelled.append((_fuse_pair(r_static[i], r_dynamic[j], cfg.boost), CONSENSUS))
    for i, d in enumerate(r_static):
        if i not in matched_s:
            labelled.append(
                (Detection(d.box, d.category, d.score * cfg.penalty, d.soft_label), STATIC_ONLY)
            )
    for j, d in enumerate(r_dynamic):
        if j not in matched_d:
            labelled.append(
                (Detection(d.box, d.category, d.score * cfg.penalty, d.soft_label), DYNAMIC_ONLY)
            )

    survivors = [(d, p) for d, p in labelled if d.score >= cfg.floor_for(d.category)]
    ignore = _ignore_regions((r_static, r_dynamic), [d for d, _ in survivors], cfg.ignore_floor)
    return _nms_with_provenance(survivors, cfg.nms_iou, r_dynamic.image_id, ignore)


def hard_select(
    r_dynamic: DetectionSet, threshold: float, nms_iou: float = 0.5, ignore_floor: float = 1.0
) -> PseudoLabelSet:
    """Single-threshold baseline: keep confident dynamic-teacher detections, NMS them."""
    if not (0.0 < threshold < 1.0):
        raise ConfigurationError(f"threshold must lie in (0, 1), got {threshold}")
    survivors = [(d, DYNAMIC_ONLY) for d in r_dynamic if d.score >= threshold]
    ignore = _ignore_regions((r_dynamic,), [d for d, _ in survivors], ignore_floor)
    return _nms_with_provenance(survivors, nms_iou, r_dynamic.image_id, ignore)


def _ignore_regions(teacher_sets, kept_detections, ignore_floor: float) -> np.ndarray:
    """Boxes of teacher detections that scored >= ignore_floor yet were not kept."""
    kept_ids = {id(d) for d in kept_detections}
    boxes = [
        d.box.as_array()
        for dets in teacher_sets
        for d in dets
        if d.score >= ignore_floor and id(d) not in kept_ids
    ]
    return np.stack(boxes) if boxes else np.zeros((0, 4))


def _nms_with_provenance(entries, nms_iou: float, image_id, ignore_boxes) -> PseudoLabelSet:
    if not entries:
        return PseudoLabelSet(DetectionSet((), image_id), (), ignore_boxes)
    dets = DetectionSet(tuple(d for d, _ in entries), image_id)
    kept = nms(dets, nms_iou, per_category=True)
    # nms preserves Detection identity, so provenance rides along by lookup.
    prov_by_id = {id(d): p for d, p in entries}
    return PseudoLabelSet(kept, tuple(prov_by_id[id(d)] for d in kept), ignore_boxes)

"""Independent brute-force reference implementations.

Everything here is written against the documented *behavior*, in plain
Python loops, without reusing the library's vectorized kernels, so the main
implementations can be checked against a second opinion.  These oracles are
deliberately slow; keep instance sizes small.
"""

from __future__ import annotations

import math

import numpy as np

from docadapt.geometry import Box, Detection, DetectionSet


def iou_ref(a: Box, b: Box) -> float:
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    area_a = (a.x_max - a.x_min) * (a.y_max - a.y_min)
    area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def nms_ref(dets: DetectionSet, iou_threshold: float, per_category: bool) -> list:
    """Indices kept by greedy suppression, checked pair-by-pair."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[int] = []
    for i in order:
        ok = True
        for j in kept:
            if per_category and dets[i].category != dets[j].category:
                continue
            if iou_ref(dets[i].box, dets[j].box) > iou_threshold:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


def match_greedy_ref(src: DetectionSet, ref: DetectionSet, thr: float, same_cat: bool):
    """Greedy matching via exhaustive candidate-pair enumeration.

    Pairs are ranked by (src score desc, src index, IoU desc, ref index) and
    accepted when both endpoints are still free — equivalent to processing
    sources in score order, each taking its best remaining reference.
    """
    cands = []
    for i in range(len(src)):
        for j in range(len(ref)):
            if same_cat and src[i].category != ref[j].category:
                continue
            v = iou_ref(src[i].box, ref[j].box)
            if v >= thr:
                cands.append((-src[i].score, i, -v, j))
    cands.sort()
    used_i: set[int] = set()
    used_j: set[int] = set()
    pairs = []
    for _, i, _, j in cands:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        pairs.append((i, j))
    return sorted(pairs)


def fuse_ref(r_static: DetectionSet, r_dynamic: DetectionSet, cfg):
    """Step-by-step reference of the consensus pipeline.

    Returns (detections, provenances) after symmetric matching, fusion,
    penalties, thresholding, and per-category NMS.
    """
    cands = []
    for i in range(len(r_static)):
        for j in range(len(r_dynamic)):
            if r_static[i].category != r_dynamic[j].category:
                continue
            v = iou_ref(r_static[i].box, r_dynamic[j].box)
            if v >= cfg.match_iou:
                hi = max(r_static[i].score, r_dynamic[j].score)
                lo = min(r_static[i].score, r_dynamic[j].score)
                cands.append((-hi, -lo, -v, i, j))
    cands.sort()
    used_i: set[int] = set()
    used_j: set[int] = set()
    fused = []
    for _, _, _, i, j in cands:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        a, b = r_static[i], r_dynamic[j]
        w = a.score + b.score
        if w > 0:
            coords = (a.score * a.box.as_array() + b.score * b.box.as_array()) / w
        else:
            coords = (a.box.as_array() + b.box.as_array()) / 2.0
        soft = (a.soft_label + b.soft_label) / 2.0
        soft = soft / soft.sum()
        fused.append(
            (Detection(Box(*coords), a.category, min(1.0, cfg.boost * max(a.score, b.score)), soft), "consensus")
        )
    for i in range(len(r_static)):
        if i not in used_i:
            d = r_static[i]
            fused.append((Detection(d.box, d.category, d.score * cfg.penalty, d.soft_label), "static_only"))
    for j in range(len(r_dynamic)):
        if j not in used_j:
            d = r_dynamic[j]
            fused.append((Detection(d.box, d.category, d.score * cfg.penalty, d.soft_label), "dynamic_only"))
    survivors = [(d, p) for d, p in fused if d.score >= cfg.floor_for(d.category)]
    dset = DetectionSet(tuple(d for d, _ in survivors))
    kept = nms_ref(dset, cfg.nms_iou, per_category=True)
    return [survivors[k][0] for k in kept], [survivors[k][1] for k in kept]


def average_precision_ref(preds, annotations, category_id: int, iou_threshold: float = 0.5):
    """PR-curve AP computed with explicit loops and an explicit envelope."""
    entries = []
    for image_pos, dset in enumerate(preds):
        for det_idx, det in enumerate(dset):
            if det.category == category_id:
                entries.append((image_pos, det_idx, dset.image_id, det))
    entries.sort(key=lambda e: (-e[3].score, e[0], e[1]))
    gts = {}
    for ann in annotations:
        if ann.category_id == category_id:
            gts.setdefault(ann.image_id, []).append([ann.box, False])
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None
    points = []
    tp = 0
    for k, (_, _, image_id, det) in enumerate(entries, start=1):
        best_iou, best_slot = -1.0, None
        for slot in gts.get(image_id, []):
            if slot[1]:
                continue
            v = iou_ref(det.box, slot[0])
            if v > best_iou:
                best_iou, best_slot = v, slot
        if best_slot is not None and best_iou >= iou_threshold:
            best_slot[1] = True
            tp += 1
        points.append((tp / n_gt, tp / k))
    ap = 0.0
    prev_recall = 0.0
    seen_recalls = sorted({r for r, _ in points})
    for r in seen_recalls:
        if r <= prev_recall:
            continue
        best_prec = max(p for rr, p in points if rr >= r)
        ap += (r - prev_recall) * best_prec
        prev_recall = r
    return ap


def kl_ref(student: np.ndarray, pseudo: np.ndarray) -> float:
    total = 0.0
    for p_row, q_row in zip(pseudo, student):
        for p, q in zip(p_row, q_row):
            if p > 0:
                total += p * (math.log(p) - math.log(q))
    return total / len(pseudo)


def entropy_ref(rows: np.ndarray) -> float:
    total = 0.0
    for row in rows:
        for p in row:
            if p > 0:
                total -= p * math.log(p)
    return total / len(rows)


def mse_ref(a: np.ndarray, b: np.ndarray) -> float:
    return sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)) / len(a)


def infonce_ref(teacher: np.ndarray, student: np.ndarray, temperature: float) -> float:
    """Symmetric InfoNCE from the explicit similarity matrix."""
    m = len(teacher)
    if m <= 1:
        return 0.0

    def unit(v):
        n = math.sqrt(sum(float(x) ** 2 for x in v))
        return [float(x) / n for x in v]

    zt = [unit(v) for v in teacher]
    zs = [unit(v) for v in student]
    sim = [[sum(a * b for a, b in zip(zt[i], zs[j])) / temperature for j in range(m)] for i in range(m)]

    def ce_rows(mat):
        total = 0.0
        for i in range(m):
            denom = sum(math.exp(mat[i][j]) for j in range(m))
            total -= math.log(math.exp(mat[i][i]) / denom)
        return total / m

    simT = [[sim[j][i] for j in range(m)] for i in range(m)]
    return ce_rows(sim) + ce_rows(simT)


def random_detection_set(rng, n, num_categories=3, size=100.0, image_id=0) -> DetectionSet:
    dets = []
    for _ in range(n):
        x0, y0 = rng.uniform(0, size * 0.7, 2)
        w, h = rng.uniform(size * 0.1, size * 0.45, 2)
        cat = int(rng.integers(0, num_categories))
        soft = rng.dirichlet(np.ones(num_categories) * 0.7)
        cat = int(soft.argmax())
        dets.append(Detection(Box(x0, y0, x0 + w, y0 + h), cat, float(rng.uniform(0, 1)), soft))
    return DetectionSet(tuple(dets), image_id)

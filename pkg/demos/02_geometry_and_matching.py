"""Box arithmetic underneath everything: IoU, NMS, and greedy matching."""

import numpy as np

from docadapt.geometry import Box, Detection, DetectionSet, iou, match_greedy, nms

a = Box(0, 0, 10, 10)
b = Box(5, 5, 15, 15)
print(f"iou(identical) = {iou(a, a)}")
print(f"iou(offset)    = {iou(a, b):.6f}  (intersection 25 / union 175)")


def det(box, cat, score):
    soft = np.full(4, 0.02)
    soft[cat] = 0.94
    return Detection(box, cat, score, soft)


# NMS: the exact duplicate of a higher-scored detection disappears; a
# different category survives untouched.
dets = DetectionSet(
    (
        det(Box(0, 0, 10, 10), 0, 0.90),
        det(Box(0, 0, 10, 10), 0, 0.80),   # duplicate, suppressed
        det(Box(0, 0, 10, 10), 1, 0.70),   # other category, kept
        det(Box(40, 40, 60, 60), 0, 0.60),
    )
)
kept = nms(dets, iou_threshold=0.5, per_category=True)
print(f"\nNMS kept {len(kept)} of {len(dets)}:")
for d in kept:
    print(f"  cat={d.category} score={d.score:.2f} box=({d.box.x_min:.0f},{d.box.y_min:.0f},{d.box.x_max:.0f},{d.box.y_max:.0f})")

# Greedy matching: sources in descending score take their best free partner.
src = DetectionSet((det(Box(0, 0, 10, 10), 0, 0.9), det(Box(20, 0, 30, 10), 1, 0.8)))
ref = DetectionSet((det(Box(1, 0, 11, 10), 0, 0.7), det(Box(21, 1, 31, 11), 1, 0.6)))
result = match_greedy(src, ref, iou_threshold=0.5, require_same_category=True)
print(f"\nmatched pairs: {result.pairs}")
print(f"unmatched src: {result.unmatched_src}, unmatched ref: {result.unmatched_ref}")

"""mAP@0.5 from first principles on a tiny hand-built example."""

import numpy as np

from docadapt.evaluation import average_precision, map50
from docadapt.geometry import Box, Detection, DetectionSet
from docadapt.labelspace import Annotation, Taxonomy

tax = Taxonomy("demo", ("block",))


def det(box, score):
    return Detection(box, 0, score, np.array([1.0]))


# one image, two ground-truth blocks
gts = [
    Annotation(0, Box(0, 0, 10, 10), 0),
    Annotation(0, Box(30, 30, 50, 50), 0),
]

# the detector finds the first block twice (a duplicate) and misses the second
preds = [
    DetectionSet(
        (
            det(Box(0, 0, 10, 10), 0.95),     # true positive
            det(Box(1, 1, 11, 11), 0.80),     # duplicate -> false positive
            det(Box(70, 70, 90, 90), 0.60),   # hallucination -> false positive
        ),
        image_id=0,
    )
]

ap = average_precision(preds, gts, category_id=0)
print("PR walk: TP@0.95 (recall 0.5, precision 1.0), FP@0.80, FP@0.60")
print(f"all-point interpolated AP = {ap}")  # 0.5: half the recall at precision 1

# adding the second block as a low-scored hit: the envelope keeps the first
# half of recall at precision 1.0, the new half arrives at precision 0.5,
# so AP = 0.5*1.0 + 0.5*0.5 = 0.75
better = [
    DetectionSet(tuple(preds[0]) + (det(Box(30, 30, 50, 50), 0.55),), image_id=0)
]
print(f"after finding the second block: AP = {average_precision(better, gts, 0)}")

result = map50(better, gts, tax)
print(f"mAP@0.5 = {result.map50}, per category {result.per_category_ap}, GT counts {result.gt_counts}")

"""Localization metrics: IoU, localization accuracy, MaxBoxAccV2.

All accuracy comparisons are strict (IoU must exceed the threshold);
records with several ground-truth boxes score against the best-matching
one.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractError
from .localization import BoundingBox

MAX_BOX_ACC_LEVELS = (0.3, 0.5, 0.7)


@dataclass
class EvalRecord:
    image_id: str
    box: BoundingBox
    gt_boxes: list
    gt_class: int
    class_ranking: list  # all class ids ordered by predicted probability, ties by id

    def __post_init__(self):
        if not self.gt_boxes:
            raise ContractError(f"record {self.image_id} has no ground-truth boxes")
        if sorted(self.class_ranking) != list(range(len(self.class_ranking))):
            raise ContractError(f"record {self.image_id} ranking is not a permutation")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union under the half-open convention."""
    ix = min(a.x1, b.x1) - max(a.x0, b.x0)
    iy = min(a.y1, b.y1) - max(a.y0, b.y0)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def _best_iou(record: EvalRecord) -> float:
    return max(iou(record.box, gt) for gt in record.gt_boxes)


def loc_acc(records, mode: str, iou_thresh: float = 0.5) -> float:
    """Fraction of records localized correctly under the given mode.

    gt-known ignores classification; top1/top5 additionally require the
    ground-truth class at rank 1 / within the top 5.
    """
    if not records:
        raise ContractError("loc_acc needs at least one record")
    if mode not in ("gt-known", "top1", "top5"):
        raise ContractError(f"unknown mode {mode!r}")
    hits = 0
    for record in records:
        if _best_iou(record) <= iou_thresh:
            continue
        if mode == "top1" and record.class_ranking[0] != record.gt_class:
            continue
        if mode == "top5" and record.gt_class not in record.class_ranking[:5]:
            continue
        hits += 1
    return hits / len(records)


def max_box_acc_v2(records) -> float:
    """Mean over IoU levels {0.3, 0.5, 0.7} of the strict-IoU hit rate,
    ignoring classification."""
    if not records:
        raise ContractError("max_box_acc_v2 needs at least one record")
    best = [_best_iou(record) for record in records]
    return sum(
        sum(1 for value in best if value > level) / len(records)
        for level in MAX_BOX_ACC_LEVELS
    ) / len(MAX_BOX_ACC_LEVELS)

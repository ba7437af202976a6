"""Map fusion, thresholding, connected components and box extraction.

The scoring-branch map and the chosen class's activation map are each
min-max normalised (a constant map normalises to zeros), multiplied,
upsampled to image resolution, thresholded, and reduced to the tight
bounding box of the largest 8-connected foreground component.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .backbone import ModelConfig
from .errors import ContractError, DimensionError
from .pipeline import two_branch_forward

DEFAULT_GRID = (0.05, 0.95, 0.05)


@dataclass(frozen=True)
class BoundingBox:
    """Pixel-space box, half-open: x0 <= x < x1, y0 <= y < y1."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x0 >= self.x1 or self.y0 >= self.y1:
            raise DimensionError(f"degenerate box ({self.x0},{self.y0},{self.x1},{self.y1})")
        if self.x0 < 0 or self.y0 < 0:
            raise DimensionError(f"negative box corner ({self.x0},{self.y0})")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass
class LocalizationResult:
    heat: np.ndarray        # image-resolution fused map in [0, 1]
    threshold: float
    box: BoundingBox
    class_id: int
    degenerate: bool        # empty foreground, box fell back to the full image


def _minmax(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    span = x.max() - x.min()
    if span <= 0.0:
        return np.zeros(x.shape, dtype=np.float32)
    return ((x - x.min()) / span).astype(np.float32)


def fuse(refined_map, cam_maps, class_id: int) -> np.ndarray:
    """Elementwise product of the normalised maps for one class.

    The class map is rectified at zero first; both maps are min-max
    normalised to [0, 1], so a constant map zeroes the fusion.
    """
    mt = nm.value_of(refined_map)
    mc = nm.value_of(cam_maps)
    if mc.ndim != 3 or mt.shape != mc.shape[1:]:
        raise DimensionError(f"map shapes disagree: {mt.shape} vs {mc.shape}")
    if not 0 <= class_id < mc.shape[0]:
        raise ContractError(f"class id {class_id} out of range for {mc.shape[0]} classes")
    rectified = np.maximum(mc[class_id], 0.0)
    return _minmax(mt) * _minmax(rectified)


def binarize(heat: np.ndarray, theta: float) -> np.ndarray:
    """Foreground mask [heat >= theta]."""
    if not 0.0 <= theta <= 1.0:
        raise ContractError(f"threshold must be in [0, 1], got {theta}")
    return nm.value_of(heat) >= np.float32(theta)


def largest_component(mask: np.ndarray):
    """Largest 8-connected foreground component, or None when empty.

    Size ties go to the component containing the smallest raster-order
    pixel (labels are assigned in raster scan order).
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    sizes = []
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or labels[sy, sx]:
                continue
            label = len(sizes) + 1
            queue = deque([(sy, sx)])
            labels[sy, sx] = label
            count = 0
            while queue:
                y, x = queue.popleft()
                count += 1
                for ny in range(max(0, y - 1), min(h, y + 2)):
                    for nx in range(max(0, x - 1), min(w, x + 2)):
                        if mask[ny, nx] and not labels[ny, nx]:
                            labels[ny, nx] = label
                            queue.append((ny, nx))
            sizes.append(count)
    if not sizes:
        return None
    best = 1 + int(np.argmax(sizes))  # argmax keeps the earliest label on ties
    return labels == best


def tight_bbox(component: np.ndarray) -> BoundingBox:
    """Tight half-open box around the set pixels of a component mask."""
    ys, xs = np.nonzero(np.asarray(component, dtype=bool))
    if ys.size == 0:
        raise ContractError("cannot box an empty component")
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def box_from_heat(heat: np.ndarray, theta: float, width: int, height: int):
    """Threshold a heat map and box its largest component.

    Empty foreground falls back to the full-image box with a degenerate
    flag so downstream metrics never crash.
    """
    component = largest_component(binarize(heat, theta))
    if component is None:
        return BoundingBox(0, 0, width, height), True
    return tight_bbox(component), False


def image_heat(params, cfg: ModelConfig, image, class_id: int, *, selection_mass=None,
               selector=None, reattention_on: bool = True) -> np.ndarray:
    """Fused localization map for one class at image resolution."""
    result = two_branch_forward(params, cfg, image, selection_mass=selection_mass,
                                selector=selector, reattention_on=reattention_on)
    fused = fuse(result.refined_map, result.cam_maps, class_id)
    return nm.bilinear_resize(fused, cfg.image_size, cfg.image_size)


def localize(params, cfg: ModelConfig, image, class_id="predicted", *, selection_mass=None,
             theta: float = 0.5, selector=None, reattention_on: bool = True) -> LocalizationResult:
    """Full pipeline from image to bounding box.

    class_id may be an integer or "predicted" (argmax of the CAM-branch
    probabilities, smallest id on ties).
    """
    result = two_branch_forward(params, cfg, image, selection_mass=selection_mass,
                                selector=selector, reattention_on=reattention_on)
    if class_id == "predicted":
        class_id = int(np.argmax(nm.value_of(result.p_cam)))
    fused = fuse(result.refined_map, result.cam_maps, int(class_id))
    heat = nm.bilinear_resize(fused, cfg.image_size, cfg.image_size)
    box, degenerate = box_from_heat(heat, theta, cfg.image_size, cfg.image_size)
    return LocalizationResult(heat=heat, threshold=float(theta), box=box,
                              class_id=int(class_id), degenerate=degenerate)


def threshold_grid(start: float, stop: float, step: float) -> list:
    """Inclusive arithmetic grid of thresholds."""
    if step <= 0 or stop < start:
        raise ContractError(f"invalid grid {start}:{stop}:{step}")
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [float(round(start + i * step, 9)) for i in range(count)]


def gt_class_heats(params, cfg: ModelConfig, samples, *, selection_mass=None,
                   selector=None, reattention_on: bool = True) -> list:
    """Fused map per sample for that sample's ground-truth class."""
    return [image_heat(params, cfg, image, int(label), selection_mass=selection_mass,
                       selector=selector, reattention_on=reattention_on)
            for image, label, _ in samples]


def hit_fraction(heats, samples, theta: float, iou_level: float, width: int, height: int) -> float:
    """Fraction of samples whose box at `theta` beats `iou_level` (strict)."""
    from .metrics import iou

    hits = 0
    for heat, (_, _, gt_boxes) in zip(heats, samples):
        box, _ = box_from_heat(heat, theta, width, height)
        if max(iou(box, gt) for gt in gt_boxes) > iou_level:
            hits += 1
    return hits / len(samples)


def gt_known_table(heats, samples, thetas, width: int, height: int) -> list:
    """(theta, GT-known accuracy) rows at IoU level 0.5."""
    return [(theta, hit_fraction(heats, samples, theta, 0.5, width, height))
            for theta in thetas]


def best_threshold(table) -> float:
    """Threshold with the highest accuracy; ties go to the smallest theta."""
    theta, _ = max(table, key=lambda row: (row[1], -row[0]))
    return theta


def grid_search_threshold(params, cfg: ModelConfig, samples, *, selection_mass=None,
                          grid=None, selector=None, reattention_on: bool = True):
    """Pick the threshold maximising ground-truth-known accuracy (IoU > 0.5).

    `samples` is a list of (image, label, gt_boxes). Returns
    (theta_star, table) where table rows are (theta, accuracy); ties go
    to the smallest theta.
    """
    if not samples:
        raise ContractError("grid search needs a non-empty manifest")
    thetas = threshold_grid(*(grid or DEFAULT_GRID))
    heats = gt_class_heats(params, cfg, samples, selection_mass=selection_mass,
                           selector=selector, reattention_on=reattention_on)
    table = gt_known_table(heats, samples, thetas, cfg.image_size, cfg.image_size)
    return best_threshold(table), table


def max_box_acc_v2_over_grid(heats, samples, thetas, width: int, height: int) -> float:
    """Calibrated-threshold MaxBoxAccV2: for each IoU level pick the best
    threshold on the grid, then average the three best hit rates."""
    from .metrics import MAX_BOX_ACC_LEVELS

    per_level = [
        max(hit_fraction(heats, samples, theta, level, width, height) for theta in thetas)
        for level in MAX_BOX_ACC_LEVELS
    ]
    return sum(per_level) / len(per_level)

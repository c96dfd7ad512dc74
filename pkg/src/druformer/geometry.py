"""Bounding boxes, IoU/GIoU and the mIoU / ACC evaluation metrics."""

from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import GeometryError
from .models import BreakdownEntry, MetricsReport
from .tensor import Tensor, concat, div, getitem, maximum, minimum, relu

DEGENERATE_EXTENT = 1e-6
NO_LABEL = "none"


@dataclass(frozen=True)
class BoxCxCyWh:
    """Centre/size box in coordinates normalised to the image."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        """Validate box invariants."""
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"Box width and height must be positive, got w={self.w}, h={self.h}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"Box centre must lie in [0, 1], got ({self.cx}, {self.cy})")

    def as_list(self) -> List[float]:
        return [self.cx, self.cy, self.w, self.h]


@dataclass(frozen=True)
class BoxXyXy:
    """Corner box; coordinates need not be normalised."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        """Validate corner ordering."""
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"Box corners must satisfy x0 < x1 and y0 < y1, got {self.as_list()}")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_list(self) -> List[float]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass(frozen=True)
class EvalPair:
    """Prediction/label pair of one evaluated sample.

    ``layout`` and ``category`` only feed the report breakdowns.
    """

    prediction: Optional[BoxXyXy]
    label: Optional[BoxXyXy]
    layout: Optional[str] = None
    category: Optional[str] = None
    degenerate_prediction: bool = False


def to_xyxy(box: BoxCxCyWh) -> BoxXyXy:
    """Convert centre/size to corners.

    Raises:
        GeometryError: If rounding collapses the box
    """
    x0, x1 = box.cx - box.w / 2.0, box.cx + box.w / 2.0
    y0, y1 = box.cy - box.h / 2.0, box.cy + box.h / 2.0
    if not (x0 < x1 and y0 < y1):
        raise GeometryError(f"Conversion of {box} produces a degenerate box")
    return BoxXyXy(x0, y0, x1, y1)


def to_cxcywh(box: BoxXyXy) -> BoxCxCyWh:
    return BoxCxCyWh((box.x0 + box.x1) / 2.0, (box.y0 + box.y1) / 2.0, box.x1 - box.x0, box.y1 - box.y0)


def _intersection(a: BoxXyXy, b: BoxXyXy) -> float:
    w = min(a.x1, b.x1) - max(a.x0, b.x0)
    h = min(a.y1, b.y1) - max(a.y0, b.y0)
    return max(w, 0.0) * max(h, 0.0)


def iou(a: BoxXyXy, b: BoxXyXy) -> float:
    inter = _intersection(a, b)
    return inter / (a.area + b.area - inter)


def giou(a: BoxXyXy, b: BoxXyXy) -> float:
    """IoU minus the fraction of the tightest enclosing box not covered by the union."""
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    enclosing = (max(a.x1, b.x1) - min(a.x0, b.x0)) * (max(a.y1, b.y1) - min(a.y0, b.y0))
    return inter / union - (enclosing - union) / enclosing


# Array forms used by the matcher (no gradient).


def cxcywh_to_xyxy_array(boxes: np.ndarray) -> np.ndarray:
    cx, cy, w, h = np.moveaxis(np.asarray(boxes, dtype=np.float64), -1, 0)
    return np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=-1)


def pairwise_iou_giou(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """IoU and GIoU between every row of ``a`` (n×4 xyxy) and every row of ``b`` (m×4 xyxy)."""
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    inter_w = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0, None)
    inter_h = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0, None)
    inter = inter_w * inter_h
    union = area_a + area_b - inter
    enclosing = (np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])) * (
        np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    )
    overlap = inter / union
    return overlap, overlap - (enclosing - union) / enclosing


# Differentiable forms used by the set loss.


def cxcywh_to_xyxy_tensor(boxes: Tensor) -> Tensor:
    cx, cy = getitem(boxes, (Ellipsis, slice(0, 1))), getitem(boxes, (Ellipsis, slice(1, 2)))
    half_w = getitem(boxes, (Ellipsis, slice(2, 3))) * 0.5
    half_h = getitem(boxes, (Ellipsis, slice(3, 4))) * 0.5
    return concat([cx - half_w, cy - half_h, cx + half_w, cy + half_h], axis=-1)


def giou_tensor(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise GIoU of two (...×4) xyxy tensors, shape (...×1)."""

    def coord(t: Tensor, i: int) -> Tensor:
        return getitem(t, (Ellipsis, slice(i, i + 1)))

    ax0, ay0, ax1, ay1 = (coord(a, i) for i in range(4))
    bx0, by0, bx1, by1 = (coord(b, i) for i in range(4))
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    inter = relu(minimum(ax1, bx1) - maximum(ax0, bx0)) * relu(minimum(ay1, by1) - maximum(ay0, by0))
    union = area_a + area_b - inter
    enclosing = (maximum(ax1, bx1) - minimum(ax0, bx0)) * (maximum(ay1, by1) - minimum(ay0, by0))
    return div(inter, union) - div(enclosing - union, enclosing)


# Evaluation


def prediction_box(cxcywh: Sequence[float]) -> Tuple[Optional[BoxXyXy], bool]:
    """Clamp a predicted centre/size box to the frame.

    Returns:
        The corner box and False, or (None, True) when clamping leaves an extent ≤ 1e-6
    """
    x0, y0, x1, y1 = np.clip(cxcywh_to_xyxy_array(np.asarray(cxcywh, dtype=np.float64)), 0.0, 1.0)
    if x1 - x0 <= DEGENERATE_EXTENT or y1 - y0 <= DEGENERATE_EXTENT:
        return None, True
    return BoxXyXy(float(x0), float(y0), float(x1), float(y1)), False


def pair_iou(pair: EvalPair) -> float:
    """IoU of one sample; absent-vs-present scores 0, absent-vs-absent scores 1."""
    if pair.degenerate_prediction:
        return 0.0
    if pair.prediction is None and pair.label is None:
        return 1.0
    if pair.prediction is None or pair.label is None:
        return 0.0
    return iou(pair.prediction, pair.label)


def miou(pairs: Sequence[EvalPair]) -> float:
    if not pairs:
        raise ValueError("miou requires at least one sample")
    return float(np.mean([pair_iou(p) for p in pairs]))


def _hit(pair: EvalPair, threshold: float) -> bool:
    if pair.prediction is None and pair.label is None and not pair.degenerate_prediction:
        return True
    return pair_iou(pair) > threshold


def acc(pairs: Sequence[EvalPair], threshold: float = 0.5) -> float:
    """Fraction of samples with IoU strictly above ``threshold``."""
    if not pairs:
        raise ValueError("acc requires at least one sample")
    return sum(_hit(p, threshold) for p in pairs) / len(pairs)


def summarize(
    pairs: Sequence[EvalPair], config_hash: Optional[str] = None, split: Optional[str] = None
) -> MetricsReport:
    """Build a MetricsReport with per-class (label category) and per-layout breakdowns."""
    if not pairs:
        raise ValueError("Cannot summarise an empty evaluation")
    by_class: Dict[str, List[EvalPair]] = defaultdict(list)
    by_layout: Dict[str, List[EvalPair]] = defaultdict(list)
    for pair in pairs:
        by_class[pair.category or NO_LABEL].append(pair)
        by_layout[pair.layout or NO_LABEL].append(pair)

    def breakdown(groups: Dict[str, List[EvalPair]]) -> Dict[str, BreakdownEntry]:
        return {key: BreakdownEntry(len(group), miou(group), acc(group)) for key, group in groups.items()}

    return MetricsReport(
        num_samples=len(pairs),
        miou=miou(pairs),
        acc=acc(pairs),
        per_class=breakdown(by_class),
        per_layout=breakdown(by_layout),
        config_hash=config_hash,
        split=split,
    )

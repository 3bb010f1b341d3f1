"""
Boxes in normalized image coordinates, overlap measures, and the
localization error taxonomy.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Sequence

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

IOU_CORRECT = 0.5


@dataclass(frozen=True, order=True)
class Window:
    """Axis-aligned box, coordinates are fractions of image width/height."""
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise DataError(f"Invalid window {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    def as_tuple(self) -> tuple:
        return (self.x0, self.y0, self.x1, self.y1)

    def to_pixels(self, width: float, height: float) -> tuple:
        return (self.x0 * width, self.y0 * height, self.x1 * width, self.y1 * height)

    @classmethod
    def from_pixels(cls, box: Sequence[float], width: float, height: float) -> "Window":
        x0, y0, x1, y1 = box
        return cls(
            min(max(x0 / width, 0.0), 1.0),
            min(max(y0 / height, 0.0), 1.0),
            min(max(x1 / width, 0.0), 1.0),
            min(max(y1 / height, 0.0), 1.0),
        )


class ErrorMode(str, Enum):
    """Localization outcome, in the order the modes are tested."""
    CORRECT_LOC = "CorrectLoc"
    HYP_IN_GT = "HypInGt"
    GT_IN_HYP = "GtInHyp"
    PARTIAL_OVERLAP = "PartialOverlap"
    NO_OVERLAP = "NoOverlap"


def area(w: Window) -> float:
    return w.width * w.height


def intersection(a: Window, b: Window) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: Window, b: Window) -> float:
    inter = intersection(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (area(a) + area(b) - inter)


def max_iou(w: Window, others: Iterable[Window]) -> float:
    return max((iou(w, o) for o in others), default=0.0)


def iou_matrix(a: Sequence[Window], b: Sequence[Window]) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b))."""
    if not a or not b:
        return np.zeros((len(a), len(b)))
    A = np.array([w.as_tuple() for w in a], dtype=np.float64)
    B = np.array([w.as_tuple() for w in b], dtype=np.float64)
    iw = np.minimum(A[:, None, 2], B[None, :, 2]) - np.maximum(A[:, None, 0], B[None, :, 0])
    ih = np.minimum(A[:, None, 3], B[None, :, 3]) - np.maximum(A[:, None, 1], B[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
    area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0.0, inter / union, 0.0)


def contains(outer: Window, inner: Window) -> bool:
    """Non-strict containment: touching edges count as inside."""
    return (
        outer.x0 <= inner.x0
        and outer.y0 <= inner.y0
        and inner.x1 <= outer.x1
        and inner.y1 <= outer.y1
    )


def margin_filter(windows: Sequence[Window], margin: float) -> List[Window]:
    if not 0.0 <= margin < 0.5:
        raise DataError(f"Margin {margin} outside [0, 0.5)")
    hi = 1.0 - margin
    return [
        w for w in windows
        if w.x0 >= margin and w.y0 >= margin and w.x1 <= hi and w.y1 <= hi
    ]


def initial_window(margin: float) -> Window:
    """The whole image up to the border margin."""
    if not 0.0 <= margin < 0.5:
        raise DataError(f"Margin {margin} outside [0, 0.5)")
    return Window(margin, margin, 1.0 - margin, 1.0 - margin)


def flip_h(w: Window) -> Window:
    return Window(1.0 - w.x1, w.y0, 1.0 - w.x0, w.y1)


def classify_error(hyp: Window, gts: Sequence[Window]) -> ErrorMode:
    if not gts:
        raise DataError("classify_error needs at least one ground-truth box")
    best = max_iou(hyp, gts)
    if best >= IOU_CORRECT:
        return ErrorMode.CORRECT_LOC
    if any(contains(gt, hyp) for gt in gts):
        return ErrorMode.HYP_IN_GT
    if any(contains(hyp, gt) for gt in gts):
        return ErrorMode.GT_IN_HYP
    if best > 0.0:
        return ErrorMode.PARTIAL_OVERLAP
    return ErrorMode.NO_OVERLAP


def nms(windows: Sequence[Window], scores: Sequence[float], iou_threshold: float = 0.3) -> List[int]:
    """Greedy non-maximum suppression; returns kept indices by decreasing score."""
    if len(windows) != len(scores):
        raise DataError(f"nms got {len(windows)} windows and {len(scores)} scores")
    order = sorted(range(len(windows)), key=lambda i: (-scores[i], i))
    overlaps = iou_matrix(list(windows), list(windows))
    keep: List[int] = []
    suppressed = np.zeros(len(windows), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= overlaps[i] > iou_threshold
    return keep

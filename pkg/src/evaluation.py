"""
Localization and detection metrics: CorLoc, average precision, window
score distributions and the error-mode breakdown.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, NumericalError
from .features import ChannelMode
from .geometry import IOU_CORRECT, ErrorMode, Window, classify_error, iou_matrix, max_iou
from .svm import LinearModel, score_rows

if TYPE_CHECKING:
    from .dataset import Dataset

log = logging.getLogger(__name__)

TIE_BREAK = "equal confidences ordered by (image_id, window) ascending"
SCORE_GROUPS = ("selected", "overlapping", "other")


class Protocol(str, Enum):
    ELEVEN_POINT = "11pt"
    CONTINUOUS = "cont"


@dataclass(frozen=True)
class Detection:
    image_id: str
    window: Window
    confidence: float

    def __post_init__(self):
        if not math.isfinite(self.confidence):
            raise NumericalError(f"Detection in '{self.image_id}' has non-finite confidence {self.confidence}")


@dataclass
class EvalReport:
    corloc: float
    ap: Optional[float]
    protocol: Protocol
    error_mode_freqs: Dict[str, float]
    corloc_trajectory: List[Optional[float]] = field(default_factory=list)
    n_images: int = 0
    upper_bound_corloc: Optional[float] = None
    refined_corloc: Optional[float] = None
    tie_break: str = TIE_BREAK

    def to_dict(self) -> dict:
        return {
            "corloc": self.corloc,
            "ap": self.ap,
            "protocol": self.protocol.value,
            "error_mode_freqs": dict(self.error_mode_freqs),
            "corloc_trajectory": list(self.corloc_trajectory),
            "n_images": self.n_images,
            "upper_bound_corloc": self.upper_bound_corloc,
            "refined_corloc": self.refined_corloc,
            "tie_break": self.tie_break,
        }


def _check_gts(selections: Mapping[str, Window], gts: Mapping[str, Sequence[Window]]):
    if not selections:
        raise DataError("No selections to evaluate")
    for image_id in selections:
        if not gts.get(image_id):
            raise DataError(f"Image '{image_id}' has no ground-truth boxes")


def corloc(selections: Mapping[str, Window], gts: Mapping[str, Sequence[Window]]) -> float:
    """Fraction of images whose selection overlaps some gt box with IoU >= 0.5."""
    _check_gts(selections, gts)
    hits = sum(max_iou(w, gts[image_id]) >= IOU_CORRECT for image_id, w in selections.items())
    return hits / len(selections)


def error_breakdown(selections: Mapping[str, Window], gts: Mapping[str, Sequence[Window]]) -> Dict[ErrorMode, float]:
    _check_gts(selections, gts)
    counts = {mode: 0 for mode in ErrorMode}
    for image_id, w in selections.items():
        counts[classify_error(w, gts[image_id])] += 1
    return {mode: n / len(selections) for mode, n in counts.items()}


def corloc_upper_bound(dataset: "Dataset") -> float:
    """Best CorLoc reachable by choosing among the candidate windows."""
    bags = [b for b in dataset.positives() if b.ground_truth]
    if not bags:
        raise DataError("No positive images with ground truth")
    hits = sum(bool(np.any(iou_matrix(list(b.windows), list(b.gt_boxes)) >= IOU_CORRECT)) for b in bags)
    return hits / len(bags)


def _ranked(dets: Sequence[Detection]) -> List[Detection]:
    return sorted(dets, key=lambda d: (-d.confidence, d.image_id, d.window.as_tuple()))


def precision_recall(dets: Sequence[Detection], gts: Mapping[str, Sequence[Window]]) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Greedy matching in confidence order. Each detection takes the unmatched
    gt box it overlaps most if that overlap is >= 0.5, else it is a false
    positive. Returns (precision, recall, n_gt).
    """
    n_gt = sum(len(g) for g in gts.values())
    used = {image_id: np.zeros(len(g), dtype=bool) for image_id, g in gts.items()}
    tp = np.zeros(len(dets))
    for k, d in enumerate(_ranked(dets)):
        boxes = gts.get(d.image_id, ())
        if not boxes:
            continue
        ov = iou_matrix([d.window], list(boxes))[0]
        ov[used[d.image_id]] = -1.0
        j = int(np.argmax(ov))
        if ov[j] >= IOU_CORRECT:
            used[d.image_id][j] = True
            tp[k] = 1.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    recall = ctp / n_gt if n_gt else np.zeros(len(dets))
    return precision, recall, n_gt


def average_precision(
    dets: Sequence[Detection],
    gts: Mapping[str, Sequence[Window]],
    protocol: Protocol = Protocol.ELEVEN_POINT,
) -> float:
    precision, recall, n_gt = precision_recall(dets, gts)
    if n_gt == 0 or len(dets) == 0:
        return 0.0
    if Protocol(protocol) is Protocol.ELEVEN_POINT:
        ap = 0.0
        for i in range(11):
            t = i / 10
            p = precision[recall >= t]
            ap += (p.max() if p.size else 0.0) / 11.0
        return float(ap)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


@dataclass
class GroupStats:
    scores: np.ndarray
    mean: float
    std: float

    @classmethod
    def of(cls, values: Sequence[float]) -> "GroupStats":
        arr = np.asarray(values, dtype=np.float64)
        if arr.size == 0:
            return cls(arr, 0.0, 0.0)
        return cls(arr, float(arr.mean()), float(arr.std()))


def score_groups(
    model: LinearModel,
    dataset: "Dataset",
    selections: Mapping[str, Window],
    mode: ChannelMode = ChannelMode.FOREGROUND_ONLY,
    normalize: bool = True,
) -> Dict[str, GroupStats]:
    """
    Split every window of the selected images into the selection itself,
    other windows overlapping it by more than 0.5, and the rest.
    """
    groups: Dict[str, List[float]] = {g: [] for g in SCORE_GROUPS}
    for image_id, sel in selections.items():
        bag = dataset.bag(image_id)
        s = score_rows(model, dataset.descriptors(image_id, mode, normalize))
        ov = iou_matrix([sel], list(bag.windows))[0]
        try:
            own = bag.windows.index(sel)
        except ValueError:
            own = int(np.argmax(ov))
        for i in range(len(bag.windows)):
            if i == own:
                groups["selected"].append(s[i])
            elif ov[i] > IOU_CORRECT:
                groups["overlapping"].append(s[i])
            else:
                groups["other"].append(s[i])
    return {g: GroupStats.of(v) for g, v in groups.items()}


@dataclass
class ScoreHistogram:
    edges: np.ndarray
    counts: Dict[str, np.ndarray]
    stats: Dict[str, GroupStats]


def score_histogram(
    model: LinearModel,
    dataset: "Dataset",
    selections: Mapping[str, Window],
    bins: int = 30,
    mode: ChannelMode = ChannelMode.FOREGROUND_ONLY,
    normalize: bool = True,
) -> ScoreHistogram:
    """Histograms of the three score groups over common bin edges."""
    if bins < 1:
        raise DataError(f"bins must be >= 1, got {bins}")
    stats = score_groups(model, dataset, selections, mode, normalize)
    everything = np.concatenate([st.scores for st in stats.values()])
    if everything.size == 0:
        raise DataError("No windows to histogram")
    lo, hi = float(everything.min()), float(everything.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    counts = {g: np.histogram(st.scores, bins=edges)[0] for g, st in stats.items()}
    for g, st in stats.items():
        log.debug(f"Score group {g}: n={st.scores.size} mean={st.mean:.3f} std={st.std:.3f}")
    return ScoreHistogram(edges=edges, counts=counts, stats=stats)

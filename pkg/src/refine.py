"""
Edge-driven objectness, greedy local window search, and fusion of
objectness with classifier scores.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError
from .features import ChannelMode
from .geometry import Window

if TYPE_CHECKING:
    from .dataset import Dataset
    from .svm import LinearModel

log = logging.getLogger(__name__)

STRADDLE_PENALTY = 0.5


@dataclass(frozen=True, eq=False)
class EdgeGroup:
    """A contour: ordered points in normalized coordinates and its magnitude."""
    contour_id: int
    points: np.ndarray
    strength: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "points", pts)
        if len(pts) < 2:
            raise DataError(f"Edge group {self.contour_id} needs >= 2 points, got {len(pts)}")
        if self.strength < 0:
            raise DataError(f"Edge group {self.contour_id} has negative strength {self.strength}")


@dataclass
class RefineConfig:
    top_n: int = 10
    w_cls: float = 0.5
    w_obj: float = 0.5
    kappa: float = 1.5
    initial_step: float = 0.05
    min_step: float = 0.004
    search: bool = True
    max_moves: int = 10000

    def __post_init__(self):
        if self.top_n < 1:
            raise DataError(f"top_n must be >= 1, got {self.top_n}")
        if self.w_cls < 0 or self.w_obj < 0 or self.w_cls + self.w_obj <= 0:
            raise DataError(f"Fusion weights must be non-negative with positive sum, got ({self.w_cls}, {self.w_obj})")
        if not 0 < self.min_step <= self.initial_step:
            raise DataError(f"Need 0 < min_step <= initial_step, got {self.min_step}, {self.initial_step}")


class _EdgeIndex:
    """All contour points packed into flat arrays for vectorized containment tests."""

    def __init__(self, edges: Sequence[EdgeGroup]):
        self.n_groups = len(edges)
        if edges:
            self.points = np.vstack([g.points for g in edges])
            self.owner = np.concatenate([np.full(len(g.points), k) for k, g in enumerate(edges)])
        else:
            self.points = np.zeros((0, 2))
            self.owner = np.zeros(0, dtype=np.int64)
        self.sizes = np.array([len(g.points) for g in edges], dtype=np.int64)
        self.strengths = np.array([g.strength for g in edges], dtype=np.float64)

    def raw_score(self, w: Window, kappa: float) -> float:
        """Edge score before clamping at zero."""
        if self.n_groups == 0:
            return 0.0
        px, py = self.points[:, 0], self.points[:, 1]
        inside = (px >= w.x0) & (px <= w.x1) & (py >= w.y0) & (py <= w.y1)
        hits = np.bincount(self.owner[inside], minlength=self.n_groups)
        full = hits == self.sizes
        straddle = (hits > 0) & ~full
        mass = self.strengths[full].sum() - STRADDLE_PENALTY * self.strengths[straddle].sum()
        return float(mass / (2.0 * (w.width + w.height)) ** kappa)


def objectness(w: Window, edges: Sequence[EdgeGroup], kappa: float = 1.5) -> float:
    return max(_EdgeIndex(edges).raw_score(w, kappa), 0.0)


def _neighbours(w: Window, step: float) -> List[Window]:
    out = []
    base = w.as_tuple()
    for coord in range(4):
        for sign in (-1.0, 1.0):
            c = list(base)
            c[coord] = min(max(c[coord] + sign * step, 0.0), 1.0)
            if tuple(c) == base or c[0] >= c[2] or c[1] >= c[3]:
                continue
            out.append(Window(*c))
    return out


def greedy_refine(w: Window, edges: Sequence[EdgeGroup], cfg: RefineConfig) -> Window:
    """
    Hill climbing on the four coordinates at decreasing step sizes.

    Moves are ranked by the unclamped edge score, so a window cutting a
    contour can still improve by growing. Objectness never decreases.
    """
    index = _EdgeIndex(edges)
    if index.n_groups == 0:
        return w
    current, best = w, index.raw_score(w, cfg.kappa)
    step = cfg.initial_step
    moves = 0
    while step >= cfg.min_step and moves < cfg.max_moves:
        pick, pick_score = None, best
        for cand in _neighbours(current, step):
            s = index.raw_score(cand, cfg.kappa)
            if s > pick_score:
                pick, pick_score = cand, s
        if pick is None:
            step /= 2.0
            continue
        current, best = pick, pick_score
        moves += 1
    if moves >= cfg.max_moves:
        log.warning(f"Local search stopped after {moves} moves at step {step:g}")
    return current


def scale_unit(values: Sequence[float]) -> List[float]:
    """Affine map to [0, 1]; a constant channel maps to 0.5."""
    if len(values) == 0:
        raise DataError("scale_unit needs a non-empty list")
    arr = np.asarray(values, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        return [0.5] * len(arr)
    return ((arr - lo) / (hi - lo)).tolist()


@dataclass
class RefineResult:
    windows: Dict[str, Window]
    provenance: Dict[str, int]
    combined: Dict[str, float]
    cls_range: Tuple[float, float]
    obj_range: Tuple[float, float]
    considered: List[dict] = field(default_factory=list)


def refine_selection(
    model: "LinearModel",
    dataset: "Dataset",
    cfg: RefineConfig,
    mode: ChannelMode = ChannelMode.FOREGROUND_ONLY,
    normalize: bool = True,
    scores: Optional[Mapping[str, np.ndarray]] = None,
    threads: int = 1,
) -> RefineResult:
    """
    Pick one window per positive training image by fusing classifier and
    objectness scores over each image's top-N classifier windows.

    `scores` may carry per-image window scores from the last re-localization;
    images missing from it are scored with `model`.
    """
    bags = dataset.positives()
    if not bags:
        raise DataError("Refinement needs positive training images")

    considered: List[Tuple[str, int, float]] = []
    for bag in bags:
        if scores is not None and bag.image_id in scores:
            s = np.asarray(scores[bag.image_id], dtype=np.float64)
            if s.shape != (len(bag.windows),):
                raise DataError(f"Score vector for '{bag.image_id}' has shape {s.shape}, expected ({len(bag.windows)},)")
        else:
            X = dataset.descriptors(bag.image_id, mode, normalize)
            if X.shape[1] != model.dim:
                raise DataError(f"Model dim {model.dim} does not match descriptor dim {X.shape[1]}")
            s = X @ model.w + model.b
        top = sorted(range(len(s)), key=lambda i: (-s[i], i))[: cfg.top_n]
        considered.extend((bag.image_id, i, float(s[i])) for i in top)

    def _search(item):
        image_id, idx, _ = item
        bag = dataset.bag(image_id)
        start = bag.windows[idx]
        refined = greedy_refine(start, bag.edge_groups, cfg) if cfg.search else start
        return refined, objectness(refined, bag.edge_groups, cfg.kappa)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        searched = list(pool.map(_search, considered))

    cls = [c[2] for c in considered]
    obj = [o for _, o in searched]
    cls_u = scale_unit(cls)
    obj_u = scale_unit(obj)

    result = RefineResult(
        windows={}, provenance={}, combined={},
        cls_range=(min(cls), max(cls)),
        obj_range=(min(obj), max(obj)),
    )
    for k, ((image_id, idx, c), (refined, o)) in enumerate(zip(considered, searched)):
        fused = cfg.w_cls * cls_u[k] + cfg.w_obj * obj_u[k]
        result.considered.append({
            "image_id": image_id, "window": idx, "cls": c, "obj": o,
            "cls_scaled": cls_u[k], "obj_scaled": obj_u[k], "combined": fused,
            "box": list(refined.as_tuple()),
        })
        if image_id not in result.combined or fused > result.combined[image_id]:
            result.windows[image_id] = refined
            result.provenance[image_id] = idx
            result.combined[image_id] = fused
    log.info(f"Refined {len(result.windows)} images over {len(considered)} windows (top_n={cfg.top_n})")
    return result

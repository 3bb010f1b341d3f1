"""
Synthetic weakly labeled detection datasets.

Positive images get one or two planted object boxes. The foreground
descriptor of a window carries class evidence proportional to its best
overlap with a planted box, buried in isotropic noise; the background
descriptor optionally carries image-level context.

Part of the foreground noise lives on a coarse grid of image cells and
is pooled by each window over the cells it covers, so overlapping
windows of one image have correlated descriptors.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np

from .dataset import Bag, Dataset, FeatureStore, WindowRef
from .errors import DataError
from .geometry import Window, flip_h, initial_window, iou_matrix, margin_filter
from .refine import EdgeGroup

log = logging.getLogger(__name__)

PLANT_INSET = 0.05
MIN_SIDE, MAX_SIDE = 0.2, 0.45
MIN_RANDOM_SIDE = 0.05
CONTOUR_POINTS_PER_SIDE = 8
SHARING_GRID = 8
CLUTTER_STRENGTH = (0.05, 0.15)

Context = Literal["complement", "full", "none"]


@dataclass
class SynthConfig:
    n_pos: int = 50
    n_neg: int = 50
    dim: int = 512
    signal_strength: Optional[float] = None
    snr: float = 0.28
    noise_sigma: float = 1.0
    candidates_per_image: int = 30
    jitter: float = 0.1
    jitter_copies: int = 3
    max_objects: int = 2
    clutter_contours: int = 3
    context: Context = "complement"
    context_signal: Optional[float] = None
    context_snr: float = 4.0
    overlap_sharing: float = 0.5
    margin: float = 0.04
    flips: bool = False
    n_test_pos: int = 0
    n_test_neg: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise DataError(f"dim must be >= 2, got {self.dim}")
        if self.n_pos < 1 or self.n_neg < 1:
            raise DataError(f"Need at least one positive and one negative image, got {self.n_pos}/{self.n_neg}")
        if self.n_test_pos < 0 or self.n_test_neg < 0:
            raise DataError("Test image counts must be >= 0")
        if self.signal_strength is not None and self.signal_strength < 0:
            raise DataError(f"signal_strength must be >= 0, got {self.signal_strength}")
        if self.context_signal is not None and self.context_signal < 0:
            raise DataError(f"context_signal must be >= 0, got {self.context_signal}")
        if self.snr < 0 or self.context_snr < 0 or self.noise_sigma < 0:
            raise DataError("snr, context_snr and noise_sigma must be >= 0")
        if self.max_objects < 1 or self.jitter_copies < 0 or self.clutter_contours < 0:
            raise DataError("max_objects must be >= 1, jitter_copies and clutter_contours >= 0")
        if not 0.0 <= self.overlap_sharing < 1.0:
            raise DataError(f"overlap_sharing must be in [0, 1), got {self.overlap_sharing}")
        if not 0.0 <= self.jitter <= 0.5:
            raise DataError(f"jitter must be in [0, 0.5], got {self.jitter}")
        if self.context not in ("complement", "full", "none"):
            raise DataError(f"Unknown context '{self.context}'")
        if 1.0 - 2 * (self.margin + PLANT_INSET) < MAX_SIDE:
            raise DataError(f"margin {self.margin} leaves no room to plant objects")
        need = self.max_objects * (1 + self.jitter_copies) + 1
        if self.candidates_per_image < need:
            raise DataError(f"candidates_per_image={self.candidates_per_image} cannot hold the planted, jittered and full-image boxes ({need})")

    @property
    def alpha(self) -> float:
        if self.signal_strength is not None:
            return float(self.signal_strength)
        return float(self.snr * self.noise_sigma * np.sqrt(self.dim))

    @property
    def beta(self) -> float:
        if self.context_signal is not None:
            return float(self.context_signal)
        return float(self.context_snr * self.noise_sigma * np.sqrt(self.dim))


@dataclass
class PlantedTruth:
    """Per image: indices of the planted candidates and q(w) of every candidate."""
    planted: Dict[str, List[int]] = field(default_factory=dict)
    quality: Dict[str, List[float]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "images": {
                image_id: {"planted": self.planted[image_id], "q": self.quality[image_id]}
                for image_id in sorted(self.planted)
            },
        }


def save_truth(truth: PlantedTruth, path: Union[str, Path]):
    Path(path).write_text(json.dumps(truth.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _unit(rng: np.random.Generator, dim: int, against: Optional[np.ndarray] = None) -> np.ndarray:
    v = rng.standard_normal(dim)
    if against is not None:
        v -= (v @ against) * against
    return v / np.linalg.norm(v)


def _plant(rng: np.random.Generator, margin: float) -> Window:
    lo, hi = margin + PLANT_INSET, 1.0 - margin - PLANT_INSET
    w, h = rng.uniform(MIN_SIDE, MAX_SIDE, size=2)
    x0 = rng.uniform(lo, hi - w)
    y0 = rng.uniform(lo, hi - h)
    return Window(x0, y0, x0 + w, y0 + h)


def _jittered(rng: np.random.Generator, box: Window, jitter: float, margin: float) -> Window:
    lo, hi = margin, 1.0 - margin
    while True:
        d = rng.uniform(-jitter, jitter, size=4) * np.array([box.width, box.height, box.width, box.height])
        x0, y0, x1, y1 = np.clip(np.array(box.as_tuple()) + d, lo, hi)
        if x1 - x0 >= MIN_RANDOM_SIDE and y1 - y0 >= MIN_RANDOM_SIDE:
            return Window(float(x0), float(y0), float(x1), float(y1))


def _random_box(rng: np.random.Generator, margin: float) -> Window:
    lo, hi = margin, 1.0 - margin
    while True:
        x0, x1 = np.sort(rng.uniform(lo, hi, size=2))
        y0, y1 = np.sort(rng.uniform(lo, hi, size=2))
        if x1 - x0 >= MIN_RANDOM_SIDE and y1 - y0 >= MIN_RANDOM_SIDE:
            return Window(float(x0), float(y0), float(x1), float(y1))


def _candidates(rng: np.random.Generator, boxes: List[Window], cfg: SynthConfig) -> Tuple[List[Window], List[int]]:
    """Full-image window first, then planted, jittered and random boxes in shuffled order."""
    rest = []
    for box in boxes:
        rest.append(box)
        rest.extend(_jittered(rng, box, cfg.jitter, cfg.margin) for _ in range(cfg.jitter_copies))
    n_planted = len(rest)
    while len(rest) < cfg.candidates_per_image - 1:
        rest.append(_random_box(rng, cfg.margin))
    order = rng.permutation(len(rest))
    windows = [initial_window(cfg.margin)] + [rest[i] for i in order]
    if len(margin_filter(windows, cfg.margin)) != len(windows):
        raise DataError("Generated a candidate window outside the border margin")
    planted = sorted(1 + int(np.flatnonzero(order == k)[0]) for k in range(n_planted) if rest[k] in boxes)
    return windows, planted


def _rectangle_contour(box: Window) -> np.ndarray:
    t = np.linspace(0.0, 1.0, CONTOUR_POINTS_PER_SIDE, endpoint=False)
    x0, y0, x1, y1 = box.as_tuple()
    top = np.column_stack([x0 + t * (x1 - x0), np.full_like(t, y0)])
    right = np.column_stack([np.full_like(t, x1), y0 + t * (y1 - y0)])
    bottom = np.column_stack([x1 - t * (x1 - x0), np.full_like(t, y1)])
    left = np.column_stack([np.full_like(t, x0), y1 - t * (y1 - y0)])
    return np.vstack([top, right, bottom, left])


def _clutter(rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    n = int(rng.integers(3, 7))
    start = rng.uniform(0.0, 1.0, size=2)
    steps = rng.normal(0.0, 0.05, size=(n - 1, 2))
    pts = np.clip(np.vstack([start, start + np.cumsum(steps, axis=0)]), 0.0, 1.0)
    length = float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
    return pts, length * float(rng.uniform(*CLUTTER_STRENGTH))


def _edge_groups(rng: np.random.Generator, boxes: List[Window], n_clutter: int) -> Tuple[EdgeGroup, ...]:
    groups = [
        EdgeGroup(contour_id=k, points=_rectangle_contour(b), strength=2.0 * (b.width + b.height))
        for k, b in enumerate(boxes)
    ]
    for k in range(n_clutter):
        pts, strength = _clutter(rng)
        groups.append(EdgeGroup(contour_id=len(boxes) + k, points=pts, strength=strength))
    return tuple(groups)


def _cell_weights(windows: List[Window], grid: int = SHARING_GRID) -> np.ndarray:
    """Unit-norm rows of the area each window covers in every cell of a grid x grid partition."""
    edges = np.linspace(0.0, 1.0, grid + 1)
    boxes = np.array([w.as_tuple() for w in windows])

    def overlap(lo, hi):
        return np.clip(np.minimum(hi[:, None], edges[None, 1:]) - np.maximum(lo[:, None], edges[None, :-1]), 0.0, None)

    ox = overlap(boxes[:, 0], boxes[:, 2])
    oy = overlap(boxes[:, 1], boxes[:, 3])
    weights = (ox[:, :, None] * oy[:, None, :]).reshape(len(windows), grid * grid)
    return weights / np.linalg.norm(weights, axis=1, keepdims=True)


class _Generator:
    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.u = _unit(self.rng, cfg.dim)
        self.v = _unit(self.rng, cfg.dim, against=self.u)
        self.blocks: List[np.ndarray] = []
        self.count = 0

    def _emit(self, block: np.ndarray) -> List[int]:
        block = np.asarray(block, dtype=np.float32)
        self.blocks.append(block)
        rows = list(range(self.count, self.count + len(block)))
        self.count += len(block)
        return rows

    def _noise(self, n: int) -> np.ndarray:
        return self.cfg.noise_sigma * self.rng.standard_normal((n, self.cfg.dim), dtype=np.float32)

    def _foreground(self, windows: List[Window], q: np.ndarray, cells: Optional[np.ndarray]) -> List[int]:
        signal = (self.cfg.alpha * q)[:, None].astype(np.float32) * self.u.astype(np.float32)[None, :]
        noise = self._noise(len(q))
        if cells is not None:
            gamma = self.cfg.overlap_sharing
            pooled = (_cell_weights(windows) @ cells).astype(np.float32)
            noise = np.float32(np.sqrt(1.0 - gamma)) * noise + np.float32(np.sqrt(gamma)) * pooled
        return self._emit(signal + noise)

    def _background(self, n: int, positive: bool) -> List[Optional[int]]:
        cfg = self.cfg
        if cfg.context == "none":
            return [None] * n
        if cfg.context == "complement":
            return self._emit(self._noise(n))
        row = self._noise(1)[0]
        if positive:
            row = row + np.float32(cfg.beta) * self.v.astype(np.float32) + np.float32(cfg.alpha) * self.u.astype(np.float32)
        return self._emit(row[None, :]) * n

    def image(self, image_id: str, positive: bool, split: str) -> Tuple[Bag, List[int], List[float]]:
        cfg = self.cfg
        boxes = [_plant(self.rng, cfg.margin) for _ in range(int(self.rng.integers(1, cfg.max_objects + 1)))] if positive else []
        windows, planted = _candidates(self.rng, boxes, cfg)
        q = iou_matrix(windows, boxes).max(axis=1) if boxes else np.zeros(len(windows))
        cells = self._noise(SHARING_GRID * SHARING_GRID) if cfg.overlap_sharing > 0 else None

        fg = self._foreground(windows, q, cells)
        bg = self._background(len(windows), positive)
        fg_flip: List[Optional[int]] = [None] * len(windows)
        bg_flip: List[Optional[int]] = [None] * len(windows)
        if cfg.flips:
            mirrored = [flip_h(w) for w in windows]
            mirrored_boxes = [flip_h(b) for b in boxes]
            q_flip = iou_matrix(mirrored, mirrored_boxes).max(axis=1) if boxes else np.zeros(len(windows))
            fg_flip = self._foreground(mirrored, q_flip, cells)
            bg_flip = self._background(len(windows), positive)

        refs = tuple(WindowRef(fg=f, bg=b, fg_flip=ff, bg_flip=bf) for f, b, ff, bf in zip(fg, bg, fg_flip, bg_flip))
        bag = Bag(
            image_id=image_id,
            label="positive" if positive else "negative",
            windows=tuple(windows),
            refs=refs,
            ground_truth=tuple(boxes),
            edge_groups=_edge_groups(self.rng, boxes, cfg.clutter_contours),
            split=split,
        )
        return bag, planted, [float(x) for x in q]


def generate(cfg: SynthConfig) -> Tuple[Dataset, PlantedTruth]:
    """Build a dataset deterministically from the config's seed."""
    gen = _Generator(cfg)
    truth = PlantedTruth(config=asdict(cfg))
    bags = []
    plan = [
        ("pos", True, "train", cfg.n_pos),
        ("neg", False, "train", cfg.n_neg),
        ("test_pos", True, "test", cfg.n_test_pos),
        ("test_neg", False, "test", cfg.n_test_neg),
    ]
    for prefix, positive, split, n in plan:
        for i in range(n):
            image_id = f"{prefix}_{i:04d}"
            bag, planted, q = gen.image(image_id, positive, split)
            bags.append(bag)
            truth.planted[image_id] = planted
            truth.quality[image_id] = q
    matrix = np.vstack(gen.blocks)
    gen.blocks.clear()
    log.info(f"Generated {len(bags)} images, {matrix.shape[0]}x{cfg.dim} features (alpha={cfg.alpha:.3g}, context={cfg.context})")
    return Dataset(bags, FeatureStore(matrix)), truth

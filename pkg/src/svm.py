"""
Linear SVM (L1 hinge loss, L2 regularization, per-class weights) trained
by dual coordinate descent, and hard-negative mining.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np

from .errors import DataError, NumericalError
from .features import ChannelMode
from .geometry import IOU_CORRECT, iou_matrix

if TYPE_CHECKING:
    from .dataset import Dataset

log = logging.getLogger(__name__)

MARGIN_VIOLATION = -1.0
_CHUNK = 512

NegativeKey = Tuple[str, int]


@dataclass
class TrainParams:
    c: float = 1.0
    pos_weight: Optional[float] = None
    tol: float = 1e-4
    max_epochs: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.c <= 0:
            raise DataError(f"SVM cost c must be > 0, got {self.c}")
        if self.pos_weight is not None and self.pos_weight <= 0:
            raise DataError(f"pos_weight must be > 0, got {self.pos_weight}")
        if self.tol <= 0:
            raise DataError(f"tol must be > 0, got {self.tol}")
        if self.max_epochs < 1:
            raise DataError(f"max_epochs must be >= 1, got {self.max_epochs}")


@dataclass(eq=False)
class LinearModel:
    """Detector for one class: score(x) = w.x + b."""
    w: np.ndarray
    b: float
    alpha: Optional[np.ndarray] = field(default=None, repr=False)
    gap: float = math.nan
    epochs: int = 0

    @property
    def dim(self) -> int:
        return int(self.w.shape[0])

    @classmethod
    def zeros(cls, dim: int) -> "LinearModel":
        return cls(w=np.zeros(dim), b=0.0)


def default_pos_weight(n_pos: int, n_neg: int) -> float:
    """Inverse class frequency, clamped to [1, 100]."""
    return float(min(max(n_neg / n_pos, 1.0), 100.0))


def _as_matrix(rows, what: str) -> np.ndarray:
    m = np.asarray(rows)
    if m.ndim == 1 and m.size:
        m = m[None, :]
    if m.ndim != 2 or m.shape[0] == 0:
        raise DataError(f"SVM training needs at least one of {what}")
    if m.dtype not in (np.float32, np.float64):
        m = m.astype(np.float64)
    return m


def _matvec(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    """X @ w accumulated in float64 without materializing a float64 copy of X."""
    out = np.empty(X.shape[0])
    for s in range(0, X.shape[0], _CHUNK):
        out[s:s + _CHUNK] = X[s:s + _CHUNK].astype(np.float64) @ w
    return out


def primal_objective(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, upper: np.ndarray) -> float:
    """0.5(|w|^2 + b^2) + sum_i upper_i * hinge_i; the bias is an extra unit feature."""
    margins = y * (_matvec(X, w) + b)
    return 0.5 * (float(w @ w) + b * b) + float(upper @ np.maximum(0.0, 1.0 - margins))


def dual_objective(alpha: np.ndarray, w: np.ndarray, b: float) -> float:
    return float(alpha.sum()) - 0.5 * (float(w @ w) + b * b)


def train(
    positives,
    negatives,
    params: TrainParams,
    init_alpha: Optional[np.ndarray] = None,
) -> LinearModel:
    """
    Minimize 0.5|w|^2 + C * sum_i omega_i * max(0, 1 - y_i (w.x_i + b)).

    Rows are ordered positives first, then negatives; `init_alpha` follows
    the same order and may be shorter (missing multipliers start at 0).
    """
    P = _as_matrix(positives, "positives")
    N = _as_matrix(negatives, "negatives")
    if P.shape[1] != N.shape[1]:
        raise DataError(f"Positive dim {P.shape[1]} does not match negative dim {N.shape[1]}")
    X = np.vstack([P, N])
    if not np.all(np.isfinite(X)):
        raise NumericalError("NaN or inf in SVM training features")

    n_pos, n_neg = len(P), len(N)
    n = n_pos + n_neg
    y = np.concatenate([np.ones(n_pos), -np.ones(n_neg)])
    pos_weight = params.pos_weight if params.pos_weight is not None else default_pos_weight(n_pos, n_neg)
    upper = params.c * np.where(y > 0, pos_weight, 1.0)
    qii = np.einsum("ij,ij->i", X, X, dtype=np.float64) + 1.0

    alpha = np.zeros(n)
    if init_alpha is not None:
        k = min(len(init_alpha), n)
        alpha[:k] = np.clip(np.asarray(init_alpha[:k], dtype=np.float64), 0.0, upper[:k])
    ay = alpha * y
    w = np.zeros(X.shape[1])
    for s in range(0, n, _CHUNK):
        w += X[s:s + _CHUNK].astype(np.float64).T @ ay[s:s + _CHUNK]
    b = float(ay.sum())

    rng = np.random.default_rng(params.seed)
    gap = math.inf
    epoch = 0
    for epoch in range(1, params.max_epochs + 1):
        for i in rng.permutation(n):
            xi = X[i]
            g = y[i] * (float(np.dot(xi, w)) + b) - 1.0
            a = alpha[i]
            if a == 0.0:
                pg = min(g, 0.0)
            elif a == upper[i]:
                pg = max(g, 0.0)
            else:
                pg = g
            if abs(pg) < 1e-15:
                continue
            new = min(max(a - g / qii[i], 0.0), upper[i])
            d = (new - a) * y[i]
            if d != 0.0:
                w += d * xi
                b += d
                alpha[i] = new
        primal = primal_objective(w, b, X, y, upper)
        dual = dual_objective(alpha, w, b)
        gap = (primal - dual) / max(abs(primal), 1e-12)
        if not math.isfinite(gap):
            raise NumericalError(f"SVM objective diverged at epoch {epoch}")
        if gap <= params.tol:
            break
    else:
        log.debug(f"SVM hit max_epochs={params.max_epochs} with relative gap {gap:.2e}")

    log.debug(f"SVM trained on {n_pos}+/{n_neg}- in {epoch} epochs, gap {gap:.2e}")
    return LinearModel(w=w, b=b, alpha=alpha, gap=gap, epochs=epoch)


def score(model: LinearModel, v) -> float:
    v = np.asarray(v)
    if v.shape != (model.dim,):
        raise DataError(f"Vector shape {v.shape} does not match model dim {model.dim}")
    return float(np.dot(model.w, v.astype(np.float64)) + model.b)


def score_rows(model: LinearModel, X: np.ndarray) -> np.ndarray:
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise DataError(f"Descriptor shape {X.shape} does not match model dim {model.dim}")
    return _matvec(X, model.w) + model.b


class NegativeCache:
    """Ordered, duplicate-free set of negative windows (image id, window index)."""

    def __init__(self, entries: Iterable[NegativeKey] = ()):
        self.entries: List[NegativeKey] = []
        self._keys: Set[NegativeKey] = set()
        for key in entries:
            self.add(key)

    def add(self, key: NegativeKey) -> bool:
        key = (str(key[0]), int(key[1]))
        if key in self._keys:
            return False
        self._keys.add(key)
        self.entries.append(key)
        return True

    def copy(self) -> "NegativeCache":
        return NegativeCache(self.entries)

    def __contains__(self, key) -> bool:
        return (str(key[0]), int(key[1])) in self._keys

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[NegativeKey]:
        return iter(self.entries)


def _minable_windows(bag) -> List[int]:
    if not bag.is_positive:
        return list(range(len(bag.windows)))
    if bag.supervision != "full":
        raise DataError(f"Cannot mine negatives in weakly labeled positive image '{bag.image_id}'")
    overlaps = iou_matrix(list(bag.windows), list(bag.gt_boxes))
    return [i for i in range(len(bag.windows)) if not np.any(overlaps[i] >= IOU_CORRECT)]


def mine_hard_negatives(
    model: LinearModel,
    dataset: "Dataset",
    cache: NegativeCache,
    source_ids: Sequence[str],
    max_new: Optional[int] = None,
    mode: ChannelMode = ChannelMode.FOREGROUND_ONLY,
    normalize: bool = True,
) -> NegativeCache:
    """
    Add margin violators (score > -1) from the source images, highest score
    first, up to `max_new` (None means no cap). Returns a new cache.
    """
    found = []
    for order, image_id in enumerate(source_ids):
        bag = dataset.bag(image_id)
        idx = _minable_windows(bag)
        if not idx:
            continue
        s = score_rows(model, dataset.descriptors(image_id, mode, normalize))
        for i in idx:
            if s[i] > MARGIN_VIOLATION and (image_id, i) not in cache:
                found.append((-s[i], order, i, image_id))
    found.sort()
    if max_new is not None:
        found = found[:max_new]

    out = cache.copy()
    for _, _, i, image_id in found:
        out.add((image_id, i))
    log.debug(f"Mining added {len(out) - len(cache)} negatives (cache {len(out)})")
    return out

"""
Window descriptors: normalization, channel composition (F / F+B / F+C)
and the inner-product diagnostic.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Optional

import numpy as np

from .errors import DataError, NumericalError

if TYPE_CHECKING:
    from .dataset import Dataset

log = logging.getLogger(__name__)

# A feature vector is a 1-D float array; matrices hold one descriptor per row.
FeatureVector = np.ndarray

NORM_EPS = 1e-12


class ChannelMode(str, Enum):
    FOREGROUND_ONLY = "f"
    FOREGROUND_PLUS_BACKGROUND = "fb"
    FOREGROUND_PLUS_CONTRASTIVE = "fc"

    @property
    def uses_background(self) -> bool:
        return self is not ChannelMode.FOREGROUND_ONLY


class PairMode(str, Enum):
    ALL_PAIRS = "all"
    WITHIN_IMAGE = "within"


def _check_finite(v: np.ndarray, what: str):
    if not np.all(np.isfinite(v)):
        raise NumericalError(f"Non-finite values in {what}")


def l2_normalize(v: FeatureVector) -> FeatureVector:
    v = np.asarray(v, dtype=np.float64)
    _check_finite(v, "feature vector")
    norm = np.linalg.norm(v)
    if norm < NORM_EPS:
        return v.copy()
    return v / norm


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise l2 normalization; rows with norm below 1e-12 pass through."""
    norms = np.linalg.norm(m.astype(np.float64), axis=1)
    scale = np.where(norms < NORM_EPS, 1.0, norms)
    return (m / scale[:, None]).astype(m.dtype, copy=False)


def contrastive(x_b: FeatureVector, x_f: FeatureVector) -> FeatureVector:
    x_b = np.asarray(x_b)
    x_f = np.asarray(x_f)
    if x_b.shape != x_f.shape:
        raise DataError(f"Contrastive descriptor needs equal dims, got {x_b.shape} and {x_f.shape}")
    return x_b - x_f


def _context_block(fg: np.ndarray, bg_dim: int) -> np.ndarray:
    """Leading foreground block that the background is contrasted against."""
    if bg_dim > fg.shape[-1]:
        raise DataError(f"Background dim {bg_dim} exceeds foreground dim {fg.shape[-1]}")
    return fg[..., :bg_dim]


def compose(fg: FeatureVector, bg: Optional[FeatureVector], mode: ChannelMode) -> FeatureVector:
    fg = np.asarray(fg)
    if mode is ChannelMode.FOREGROUND_ONLY:
        return fg
    if bg is None:
        raise DataError(f"Channel mode '{mode.value}' needs a background descriptor")
    bg = np.asarray(bg)
    if mode is ChannelMode.FOREGROUND_PLUS_BACKGROUND:
        return np.concatenate([fg, bg])
    return np.concatenate([fg, contrastive(bg, _context_block(fg, bg.shape[-1]))])


def compose_rows(fg: np.ndarray, bg: Optional[np.ndarray], mode: ChannelMode) -> np.ndarray:
    """compose() applied to matching rows of two matrices."""
    if mode is ChannelMode.FOREGROUND_ONLY:
        return fg
    if bg is None:
        raise DataError(f"Channel mode '{mode.value}' needs background descriptors")
    if bg.shape[0] != fg.shape[0]:
        raise DataError(f"Row count mismatch: {fg.shape[0]} foreground vs {bg.shape[0]} background")
    if mode is ChannelMode.FOREGROUND_PLUS_BACKGROUND:
        return np.hstack([fg, bg])
    return np.hstack([fg, bg - _context_block(fg, bg.shape[1])])


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    n_pairs: int
    mean: float
    radius: float
    near_orthogonal_fraction: float


def inner_product_histogram(
    dataset: "Dataset",
    pair_mode: PairMode = PairMode.ALL_PAIRS,
    sample_size: int = 1000,
    bins: int = 40,
    seed: int = 0,
    mode: ChannelMode = ChannelMode.FOREGROUND_ONLY,
    radius: float = 0.1,
) -> Histogram:
    """
    Distribution of inner products between sampled window descriptors.

    Each descriptor is shifted by its own mean and l2 normalized before the
    products are taken, so values lie in [-1, 1].
    """
    if sample_size < 2:
        raise DataError(f"sample_size must be >= 2, got {sample_size}")
    slots = [
        (bag.image_id, i)
        for bag in dataset.train_bags()
        for i in range(len(bag.windows))
    ]
    if len(slots) < 2:
        raise DataError(f"Need at least 2 windows, dataset has {len(slots)}")

    rng = np.random.default_rng(seed)
    n = min(sample_size, len(slots))
    picked = np.sort(rng.choice(len(slots), size=n, replace=False))

    rows = []
    owners = []
    for k in picked:
        image_id, i = slots[k]
        rows.append(dataset.descriptors(image_id, mode, normalize=False)[i])
        owners.append(image_id)
    V = np.asarray(rows, dtype=np.float64)
    V -= V.mean(axis=1, keepdims=True)
    V = l2_normalize_rows(V)
    G = np.clip(V @ V.T, -1.0, 1.0)

    iu, ju = np.triu_indices(n, k=1)
    if pair_mode is PairMode.WITHIN_IMAGE:
        owner_arr = np.asarray(owners)
        same = owner_arr[iu] == owner_arr[ju]
        iu, ju = iu[same], ju[same]
    if iu.size == 0:
        raise DataError(f"No window pairs available for pair mode '{pair_mode.value}'")

    products = G[iu, ju]
    counts, edges = np.histogram(products, bins=bins, range=(-1.0, 1.0))
    near = float(np.mean(np.abs(products) < radius))
    log.info(f"Inner products: {products.size} pairs ({pair_mode.value}), {near:.3f} within |p|<{radius}")
    return Histogram(
        edges=edges,
        counts=counts,
        n_pairs=int(products.size),
        mean=float(products.mean()),
        radius=radius,
        near_orthogonal_fraction=near,
    )

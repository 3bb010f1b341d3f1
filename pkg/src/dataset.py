"""
Bags, feature store and the on-disk dataset formats.

A dataset is a JSON manifest describing images (bags) and their candidate
windows, plus a binary MILF sidecar holding one float32 descriptor per row.
"""

import hashlib
import json
import logging
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DataError, GroundTruthAccessError
from .features import ChannelMode, compose_rows, l2_normalize_rows
from .geometry import Window, margin_filter
from .refine import EdgeGroup

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MILF_MAGIC = b"MILF"
MILF_VERSION = 1
MILF_HEADER = struct.Struct("<4sIIQ")

Label = Literal["positive", "negative"]
Supervision = Literal["weak", "full"]
Split = Literal["train", "test"]


class GroundTruthGuard:
    """Refuses ground-truth reads of weakly supervised bags while sealed."""

    def __init__(self):
        self._depth = 0
        self._lock = threading.Lock()
        self.violations: List[str] = []

    @property
    def is_sealed(self) -> bool:
        return self._depth > 0

    @contextmanager
    def sealed(self) -> Iterator[None]:
        with self._lock:
            self._depth += 1
        try:
            yield
        finally:
            with self._lock:
                self._depth -= 1

    def check(self, bag: "Bag"):
        if self._depth and bag.supervision == "weak":
            with self._lock:
                self.violations.append(bag.image_id)
            raise GroundTruthAccessError(f"Ground truth of weakly supervised image '{bag.image_id}' read during training")


@dataclass(frozen=True)
class WindowRef:
    """Feature-store rows of one candidate window."""
    fg: int
    bg: Optional[int] = None
    fg_flip: Optional[int] = None
    bg_flip: Optional[int] = None


@dataclass(frozen=True, eq=False)
class Bag:
    """One image seen as a bag of candidate windows."""
    image_id: str
    label: Label
    windows: Tuple[Window, ...]
    refs: Tuple[WindowRef, ...]
    ground_truth: Tuple[Window, ...] = field(default=(), repr=False)
    edge_groups: Tuple[EdgeGroup, ...] = field(default=(), repr=False)
    supervision: Supervision = "weak"
    split: Split = "train"
    guard: Optional[GroundTruthGuard] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.label not in ("positive", "negative"):
            raise DataError(f"Bag '{self.image_id}' has unknown label '{self.label}'")
        if len(self.windows) != len(self.refs):
            raise DataError(f"Bag '{self.image_id}' has {len(self.windows)} windows but {len(self.refs)} feature refs")
        if self.label == "positive" and not self.windows:
            raise DataError(f"Positive bag '{self.image_id}' has no windows")

    @property
    def is_positive(self) -> bool:
        return self.label == "positive"

    @property
    def has_flips(self) -> bool:
        return all(r.fg_flip is not None for r in self.refs)

    @property
    def gt_boxes(self) -> Tuple[Window, ...]:
        if self.guard is not None:
            self.guard.check(self)
        return self.ground_truth


class FeatureStore:
    """Immutable (count, dim) descriptor matrix addressed by row index."""

    def __init__(self, matrix: np.ndarray):
        if matrix.ndim != 2 or matrix.shape[1] == 0:
            raise DataError(f"Feature matrix must be 2-D with dim > 0, got shape {matrix.shape}")
        self.matrix = matrix

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def count(self) -> int:
        return int(self.matrix.shape[0])

    def rows(self, index: Sequence[int]) -> np.ndarray:
        idx = np.asarray(index, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.count):
            raise DataError(f"Feature index out of range [0, {self.count})")
        return np.asarray(self.matrix[idx], dtype=np.float32)


def write_milf(path: Union[str, Path], matrix: np.ndarray):
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    count, dim = matrix.shape
    with open(path, "wb") as f:
        f.write(MILF_HEADER.pack(MILF_MAGIC, MILF_VERSION, dim, count))
        f.write(matrix.tobytes(order="C"))


def read_milf(path: Union[str, Path]) -> FeatureStore:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(MILF_HEADER.size)
    if len(head) < MILF_HEADER.size:
        raise DataError(f"{path}: truncated MILF header")
    magic, version, dim, count = MILF_HEADER.unpack(head)
    if magic != MILF_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != MILF_VERSION:
        raise DataError(f"{path}: unsupported MILF version {version}")
    expected = MILF_HEADER.size + 4 * dim * count
    if path.stat().st_size != expected:
        raise DataError(f"{path}: size {path.stat().st_size} does not match header ({expected} bytes)")
    matrix = np.memmap(path, dtype="<f4", mode="r", offset=MILF_HEADER.size, shape=(count, dim))
    return FeatureStore(matrix)


class Dataset:
    """Bags plus their feature store. Bags are never mutated after construction."""

    def __init__(self, bags: Iterable[Bag], store: FeatureStore, guard: Optional[GroundTruthGuard] = None):
        self.guard = guard or GroundTruthGuard()
        self.bags: Tuple[Bag, ...] = tuple(replace(b, guard=self.guard) for b in bags)
        self.store = store
        self._index: Dict[str, int] = {}
        for i, bag in enumerate(self.bags):
            if bag.image_id in self._index:
                raise DataError(f"Duplicate image id '{bag.image_id}'")
            self._index[bag.image_id] = i
        self._descriptors: Dict[tuple, np.ndarray] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.bags)

    @property
    def dim(self) -> int:
        return self.store.dim

    def bag(self, image_id: str) -> Bag:
        try:
            return self.bags[self._index[image_id]]
        except KeyError:
            raise DataError(f"Unknown image id '{image_id}'") from None

    def train_bags(self) -> List[Bag]:
        return [b for b in self.bags if b.split == "train"]

    def test_bags(self) -> List[Bag]:
        return [b for b in self.bags if b.split == "test"]

    def positives(self, split: Split = "train") -> List[Bag]:
        return [b for b in self.bags if b.split == split and b.is_positive]

    def negatives(self, split: Split = "train") -> List[Bag]:
        return [b for b in self.bags if b.split == split and not b.is_positive]

    def sealed(self):
        """Context in which weak ground truth must not be read."""
        return self.guard.sealed()

    def descriptors(self, image_id: str, mode: ChannelMode, normalize: bool = True, flip: bool = False) -> np.ndarray:
        """Composed descriptors of every window of a bag, one row per window."""
        key = (image_id, mode, normalize, flip)
        cached = self._descriptors.get(key)
        if cached is not None:
            return cached

        bag = self.bag(image_id)
        if flip and not bag.has_flips:
            raise DataError(f"Bag '{image_id}' has no flip features")
        fg_idx = [r.fg_flip if flip else r.fg for r in bag.refs]
        fg = self.store.rows(fg_idx)
        bg = None
        if mode.uses_background:
            bg_idx = [r.bg_flip if flip else r.bg for r in bag.refs]
            if any(i is None for i in bg_idx):
                raise DataError(f"Bag '{image_id}' lacks background features for mode '{mode.value}'")
            bg = self.store.rows(bg_idx)
        out = compose_rows(fg, bg, mode)
        if normalize:
            out = l2_normalize_rows(out)
        out = np.ascontiguousarray(out, dtype=np.float32)
        out.flags.writeable = False
        with self._lock:
            self._descriptors.setdefault(key, out)
        return self._descriptors[key]

    def with_supervision(self, image_ids: Iterable[str]) -> "Dataset":
        """Copy in which the given positive bags carry full supervision."""
        ids = set(image_ids)
        bags = []
        for bag in self.bags:
            if bag.image_id in ids:
                if not bag.is_positive:
                    raise DataError(f"Only positive bags can be fully supervised, '{bag.image_id}' is negative")
                if not bag.ground_truth:
                    raise DataError(f"Bag '{bag.image_id}' has no ground-truth boxes")
                bag = replace(bag, supervision="full")
            bags.append(bag)
        return Dataset(bags, self.store)

    def filtered(self, margin: float) -> "Dataset":
        """Copy keeping only windows that respect the border margin."""
        bags = []
        for bag in self.bags:
            kept = set(margin_filter(bag.windows, margin))
            pairs = [(w, r) for w, r in zip(bag.windows, bag.refs) if w in kept]
            if len(pairs) != len(bag.windows):
                log.debug(f"Bag {bag.image_id}: margin filter kept {len(pairs)}/{len(bag.windows)} windows")
            bags.append(replace(
                bag,
                windows=tuple(w for w, _ in pairs),
                refs=tuple(r for _, r in pairs),
            ))
        return Dataset(bags, self.store)


def _window(box, scale: Optional[Tuple[float, float]]) -> Window:
    if scale is not None:
        return Window.from_pixels(box, *scale)
    return Window(*[float(v) for v in box])


def _parse_image(entry: dict) -> Bag:
    try:
        image_id = str(entry["id"])
        scale = None
        if "width" in entry and "height" in entry:
            scale = (float(entry["width"]), float(entry["height"]))
        windows, refs = [], []
        for w in entry.get("windows", []):
            windows.append(_window(w["box"], scale))
            refs.append(WindowRef(
                fg=int(w["fg"]),
                bg=w.get("bg"),
                fg_flip=w.get("fg_flip"),
                bg_flip=w.get("bg_flip"),
            ))
        gts = tuple(_window(b, scale) for b in entry.get("gt_boxes", []))
        edges = []
        for k, g in enumerate(entry.get("edge_groups", [])):
            pts = np.asarray(g["points"], dtype=np.float64)
            if scale is not None:
                pts = pts / np.asarray(scale)
            edges.append(EdgeGroup(contour_id=int(g.get("contour_id", k)), points=pts, strength=float(g["strength"])))
        return Bag(
            image_id=image_id,
            label=entry["label"],
            windows=tuple(windows),
            refs=tuple(refs),
            ground_truth=gts,
            edge_groups=tuple(edges),
            supervision=entry.get("supervision", "weak"),
            split=entry.get("split", "train"),
        )
    except (KeyError, TypeError) as e:
        raise DataError(f"Malformed image entry {entry.get('id', '?')!r}: {e}") from e


def load_dataset(manifest_path: Union[str, Path]) -> Dataset:
    manifest_path = Path(manifest_path)
    with open(manifest_path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("version") != MANIFEST_VERSION:
        raise DataError(f"{manifest_path}: unsupported manifest version {doc.get('version')}")
    sidecar = manifest_path.parent / doc.get("features", manifest_path.with_suffix(".milf").name)
    store = read_milf(sidecar)
    bags = [_parse_image(entry) for entry in doc.get("images", [])]
    for bag in bags:
        for ref in bag.refs:
            for idx in (ref.fg, ref.bg, ref.fg_flip, ref.bg_flip):
                if idx is not None and not 0 <= idx < store.count:
                    raise DataError(f"Bag '{bag.image_id}' references feature row {idx}, store has {store.count}")
    log.info(f"Loaded {len(bags)} images, {store.count}x{store.dim} features from {manifest_path}")
    return Dataset(bags, store)


def _box(w: Window) -> List[float]:
    return [float(v) for v in w.as_tuple()]


def manifest_document(dataset: Dataset, sidecar_name: str) -> dict:
    images = []
    for bag in dataset.bags:
        windows = []
        for w, r in zip(bag.windows, bag.refs):
            entry = {"box": _box(w), "fg": r.fg}
            for key in ("bg", "fg_flip", "bg_flip"):
                if getattr(r, key) is not None:
                    entry[key] = getattr(r, key)
            windows.append(entry)
        images.append({
            "id": bag.image_id,
            "label": bag.label,
            "supervision": bag.supervision,
            "split": bag.split,
            "windows": windows,
            "gt_boxes": [_box(g) for g in bag.ground_truth],
            "edge_groups": [
                {"contour_id": g.contour_id, "strength": float(g.strength), "points": g.points.tolist()}
                for g in bag.edge_groups
            ],
        })
    return {"version": MANIFEST_VERSION, "features": sidecar_name, "images": images}


def save_dataset(dataset: Dataset, manifest_path: Union[str, Path], sidecar_name: str = "features.milf"):
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    write_milf(manifest_path.parent / sidecar_name, np.asarray(dataset.store.matrix))
    text = json.dumps(manifest_document(dataset, sidecar_name), sort_keys=True, indent=2)
    manifest_path.write_text(text + "\n", encoding="utf-8")
    log.info(f"Wrote {len(dataset)} images to {manifest_path}")


def dataset_hash(manifest_path: Union[str, Path]) -> str:
    """sha256 over the manifest bytes followed by the sidecar bytes."""
    manifest_path = Path(manifest_path)
    h = hashlib.sha256()
    raw = manifest_path.read_bytes()
    h.update(raw)
    doc = json.loads(raw)
    sidecar = manifest_path.parent / doc.get("features", manifest_path.with_suffix(".milf").name)
    with open(sidecar, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

"""
Run directory files: manifests, JSON/CSV metric outputs and saved models.

JSON is written with sorted keys and two-space indent, CSV with a header
row and LF line endings, so reruns diff cleanly.
"""

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from . import __version__
from .errors import DataError
from .geometry import Window
from .svm import LinearModel

log = logging.getLogger(__name__)

PathLike = Union[str, Path]

RUN_MANIFEST = "run_manifest.json"


def write_json(path: PathLike, doc: Any):
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_json(path: PathLike) -> Any:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])


def save_model(path: PathLike, model: LinearModel):
    np.savez(path, w=model.w, b=np.float64(model.b), gap=np.float64(model.gap), epochs=np.int64(model.epochs))


def load_model(path: PathLike) -> LinearModel:
    with np.load(path, allow_pickle=False) as z:
        try:
            return LinearModel(w=z["w"].astype(np.float64), b=float(z["b"]), gap=float(z["gap"]), epochs=int(z["epochs"]))
        except KeyError as e:
            raise DataError(f"{path}: not a saved model ({e})") from e


def save_scores(path: PathLike, scores: Mapping[str, np.ndarray]):
    np.savez(path, **{k: np.asarray(v) for k, v in sorted(scores.items())})


def load_scores(path: PathLike) -> Dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def windows_document(windows: Mapping[str, Window], indices: Optional[Mapping[str, int]] = None) -> dict:
    doc = {}
    for image_id, w in sorted(windows.items()):
        entry = {"box": list(w.as_tuple())}
        if indices is not None and image_id in indices:
            entry["index"] = int(indices[image_id])
        doc[image_id] = entry
    return doc


def read_windows(path: PathLike) -> Dict[str, Window]:
    return {image_id: Window(*e["box"]) for image_id, e in read_json(path).items()}


@dataclass
class RunManifest:
    """What produced the files in a run (or dataset) directory."""
    command: str
    config: Dict[str, Any] = field(default_factory=dict)
    seeds: Dict[str, int] = field(default_factory=dict)
    dataset: Optional[str] = None
    dataset_hash: Optional[str] = None
    version: str = __version__
    started_at: float = field(default_factory=time.time)
    wall_clock: float = 0.0
    outputs: List[str] = field(default_factory=list)

    def finish(self, outputs: Iterable[str]):
        self.outputs = sorted(outputs)
        self.wall_clock = time.time() - self.started_at

    def write(self, directory: PathLike, name: str = RUN_MANIFEST):
        write_json(Path(directory) / name, asdict(self))
        log.debug(f"Wrote {name} to {directory}")

    @classmethod
    def read(cls, directory: PathLike, name: str = RUN_MANIFEST) -> "RunManifest":
        path = Path(directory) / name
        if not path.exists():
            raise DataError(f"{directory} has no {name}")
        return cls(**read_json(path))

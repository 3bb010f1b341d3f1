"""
Training loops: standard MIL, multi-fold MIL and mixed supervision.

Every loop starts from whole-image windows (up to the border margin),
alternates detector training with re-localization in the positive images,
and grows a persistent hard-negative cache after each iteration.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .dataset import Bag, Dataset
from .errors import DataError
from .evaluation import Detection, corloc, score_groups
from .features import ChannelMode
from .geometry import Window, initial_window, iou_matrix, nms
from .svm import LinearModel, NegativeCache, TrainParams, mine_hard_negatives, score_rows, train

log = logging.getLogger(__name__)


@dataclass
class MilConfig:
    k_folds: int = 10
    iterations: int = 10
    margin: float = 0.04
    channel_mode: ChannelMode = ChannelMode.FOREGROUND_ONLY
    train_params: TrainParams = field(default_factory=TrainParams)
    mining_rounds: int = 2
    mining_max_new: Optional[int] = 2000
    seed: int = 0
    normalize: bool = True
    flip_positives: bool = False
    threads: int = 1

    def __post_init__(self):
        self.channel_mode = ChannelMode(self.channel_mode)
        if self.k_folds < 1:
            raise DataError(f"k_folds must be >= 1, got {self.k_folds}")
        if self.iterations < 0:
            raise DataError(f"iterations must be >= 0, got {self.iterations}")
        if self.mining_rounds < 0:
            raise DataError(f"mining_rounds must be >= 0, got {self.mining_rounds}")
        if self.mining_max_new is not None and self.mining_max_new < 0:
            raise DataError(f"mining_max_new must be >= 0, got {self.mining_max_new}")
        if not 0.0 <= self.margin < 0.5:
            raise DataError(f"margin must be in [0, 0.5), got {self.margin}")
        if self.threads < 1:
            raise DataError(f"threads must be >= 1, got {self.threads}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mode"] = self.channel_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MilConfig":
        d = dict(d)
        d["train_params"] = TrainParams(**d.get("train_params", {}))
        return cls(**d)


@dataclass
class IterationRecord:
    iteration: int
    selections: Dict[str, int]
    n_negatives: int
    corloc: Optional[float] = None
    score_stats: Dict[str, Tuple[float, float]] = field(default_factory=dict)


@dataclass(frozen=True)
class FoldAudit:
    """Which positive images trained the detector that re-localized which images."""
    iteration: int
    fold: int
    trained_on: Tuple[str, ...]
    relocalized: Tuple[str, ...]

    @property
    def violates(self) -> bool:
        return not set(self.trained_on).isdisjoint(self.relocalized)


def _record_dict(r: IterationRecord) -> dict:
    return {
        "iteration": r.iteration,
        "corloc": r.corloc,
        "n_negatives": r.n_negatives,
        "selections": dict(sorted(r.selections.items())),
        "score_stats": {k: list(v) for k, v in sorted(r.score_stats.items())},
    }


@dataclass
class RunTrajectory:
    mode: str
    config: MilConfig
    iterations: List[IterationRecord]
    model: LinearModel
    audit: List[FoldAudit]
    negatives: NegativeCache
    supervised: Tuple[str, ...] = ()
    reloc_scores: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def final_selections(self) -> Dict[str, int]:
        return dict(self.iterations[-1].selections)

    def selected_windows(self, dataset: Dataset, iteration: int = -1) -> Dict[str, Window]:
        sel = self.iterations[iteration].selections
        return {image_id: dataset.bag(image_id).windows[i] for image_id, i in sel.items()}

    def weak_ids(self) -> List[str]:
        sup = set(self.supervised)
        return [i for i in self.iterations[0].selections if i not in sup]

    def unchanged_fraction(self, start: int = 1, end: int = -1) -> float:
        """Share of weakly supervised positives whose selection at `end` equals the one at `start`."""
        ids = self.weak_ids()
        if not ids:
            return 0.0
        a = self.iterations[start].selections
        b = self.iterations[end].selections
        return sum(a[i] == b[i] for i in ids) / len(ids)

    def fold_violations(self) -> List[FoldAudit]:
        return [a for a in self.audit if a.violates]

    def corloc_curve(self) -> List[Optional[float]]:
        """CorLoc after each training iteration (the initialization is not included)."""
        return [r.corloc for r in self.iterations[1:]]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "config": self.config.to_dict(),
            "supervised": list(self.supervised),
            "initial": _record_dict(self.iterations[0]),
            "iterations": [_record_dict(r) for r in self.iterations[1:]],
            "audit": [
                {"iteration": a.iteration, "fold": a.fold, "trained_on": list(a.trained_on), "relocalized": list(a.relocalized)}
                for a in self.audit
            ],
            "model": {"gap": self.model.gap if math.isfinite(self.model.gap) else None, "epochs": self.model.epochs},
        }


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def partition_folds(positive_ids: Sequence[str], k: int, seed: int) -> List[List[str]]:
    """Random disjoint folds whose sizes differ by at most one."""
    if k < 1:
        raise DataError(f"Number of folds must be >= 1, got {k}")
    if k > len(positive_ids):
        raise DataError(f"Cannot split {len(positive_ids)} positive images into {k} folds")
    perm = np.random.default_rng(seed).permutation(len(positive_ids))
    return [[positive_ids[j] for j in perm[f::k]] for f in range(k)]


def window_scores(model: LinearModel, dataset: Dataset, image_id: str, mode: ChannelMode, normalize: bool = True) -> np.ndarray:
    return score_rows(model, dataset.descriptors(image_id, mode, normalize))


def relocalize(model: LinearModel, dataset: Dataset, image_id: str, mode: ChannelMode = ChannelMode.FOREGROUND_ONLY, normalize: bool = True) -> int:
    """Index of the top scoring window; ties go to the lowest index."""
    return int(np.argmax(window_scores(model, dataset, image_id, mode, normalize)))


def _initial_index(bag: Bag, margin: float) -> int:
    target = initial_window(margin)
    try:
        return bag.windows.index(target)
    except ValueError:
        best = int(np.argmax(iou_matrix([target], list(bag.windows))[0]))
        log.warning(f"Bag {bag.image_id} has no whole-image window, starting from window {best}")
        return best


def _nearest_candidate(bag: Bag, w: Window) -> int:
    return int(np.argmax(iou_matrix([w], list(bag.windows))[0]))


def _gt_indices(bag: Bag) -> Tuple[int, ...]:
    """Candidates standing in for each ground-truth box of a supervised bag."""
    out: List[int] = []
    for gt in bag.gt_boxes:
        i = _nearest_candidate(bag, gt)
        if i not in out:
            out.append(i)
    return tuple(out)


class _Trainer:
    """Assembles training sets from (image, window) entries and trains detectors."""

    def __init__(self, dataset: Dataset, cfg: MilConfig):
        self.dataset = dataset
        self.cfg = cfg
        self.mode = cfg.channel_mode

    def rows(self, entries: Sequence[Tuple[str, int]], flips: bool = False) -> np.ndarray:
        out = []
        for image_id, i in entries:
            out.append(self.dataset.descriptors(image_id, self.mode, self.cfg.normalize)[i])
            if flips and self.dataset.bag(image_id).has_flips:
                out.append(self.dataset.descriptors(image_id, self.mode, self.cfg.normalize, flip=True)[i])
        return np.asarray(out)

    def fit(self, positives: Sequence[Tuple[str, int]], cache: NegativeCache, seed: int,
            init_alpha: Optional[np.ndarray] = None, flips: Optional[bool] = None) -> LinearModel:
        flips = self.cfg.flip_positives if flips is None else flips
        params = replace(self.cfg.train_params, seed=seed)
        return train(self.rows(positives, flips), self.rows(list(cache)), params, init_alpha=init_alpha)


def _positive_entries(ids: Sequence[str], selections: Mapping[str, int],
                      fixed: Mapping[str, Tuple[int, ...]]) -> List[Tuple[str, int]]:
    entries = [(i, selections[i]) for i in ids]
    for image_id in sorted(fixed):
        entries.extend((image_id, j) for j in fixed[image_id])
    return entries


def _run(dataset: Dataset, cfg: MilConfig, multifold: bool, label: str) -> RunTrajectory:
    positives = dataset.positives()
    negatives = dataset.negatives()
    if not positives:
        raise DataError("MIL training needs at least one positive image")
    if not negatives:
        raise DataError("MIL training needs at least one negative image")

    trainer = _Trainer(dataset, cfg)
    mode, normalize = cfg.channel_mode, cfg.normalize
    supervised = tuple(b.image_id for b in positives if b.supervision == "full")
    weak = [b.image_id for b in positives if b.supervision == "weak"]
    neg_ids = [b.image_id for b in negatives if b.windows]
    mining_sources = neg_ids + list(supervised)

    k_folds = cfg.k_folds
    if multifold and weak and k_folds > len(weak):
        if supervised:
            log.warning(f"Only {len(weak)} weak positives, using {len(weak)} folds instead of {k_folds}")
            k_folds = len(weak)
        else:
            raise DataError(f"k_folds={k_folds} exceeds the {len(weak)} positive images")

    audit: List[FoldAudit] = []
    reloc_scores: Dict[str, np.ndarray] = {}
    model: Optional[LinearModel] = None

    with dataset.sealed(), ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        fixed = {image_id: _gt_indices(dataset.bag(image_id)) for image_id in supervised}
        selections = {image_id: _initial_index(dataset.bag(image_id), cfg.margin) for image_id in weak}
        cache = NegativeCache((image_id, _initial_index(dataset.bag(image_id), cfg.margin)) for image_id in neg_ids)

        def _snapshot() -> Dict[str, int]:
            snap = dict(selections)
            snap.update({image_id: idx[0] for image_id, idx in fixed.items()})
            return snap

        records = [IterationRecord(iteration=0, selections=_snapshot(), n_negatives=len(cache))]
        log.info(f"{label}: {len(weak)} weak + {len(supervised)} supervised positives, {len(neg_ids)} negatives, dim={dataset.dim}")

        for t in range(1, cfg.iterations + 1):
            if weak and multifold:
                folds = partition_folds(weak, k_folds, derive_seed(cfg.seed, t))

                def _fold_job(job):
                    k, fold = job
                    held = set(fold)
                    train_ids = [i for i in weak if i not in held]
                    if train_ids or fixed:
                        fold_model = trainer.fit(_positive_entries(train_ids, selections, fixed), cache, derive_seed(cfg.seed, t, k + 1))
                    else:
                        fold_model = LinearModel.zeros(dataset.descriptors(fold[0], mode, normalize).shape[1])
                    scores = {i: window_scores(fold_model, dataset, i, mode, normalize) for i in fold}
                    return train_ids, scores

                results = list(pool.map(_fold_job, enumerate(folds)))
                new_selections = dict(selections)
                for k, (fold, (train_ids, scores)) in enumerate(zip(folds, results)):
                    audit.append(FoldAudit(t, k, tuple(sorted(train_ids + list(supervised))), tuple(sorted(fold))))
                    for image_id in fold:
                        reloc_scores[image_id] = scores[image_id]
                        new_selections[image_id] = int(np.argmax(scores[image_id]))
                    log.debug(f"Iteration {t} fold {k}: trained on {len(train_ids)} images, re-localized {len(fold)}")
                selections = new_selections
                model = trainer.fit(_positive_entries(weak, selections, fixed), cache, derive_seed(cfg.seed, t, 0))
            else:
                model = trainer.fit(_positive_entries(weak, selections, fixed), cache, derive_seed(cfg.seed, t, 0))
                if weak:
                    audit.append(FoldAudit(t, 0, tuple(sorted(weak + list(supervised))), tuple(sorted(weak))))
                    for image_id in weak:
                        reloc_scores[image_id] = window_scores(model, dataset, image_id, mode, normalize)
                        selections[image_id] = int(np.argmax(reloc_scores[image_id]))

            for r in range(cfg.mining_rounds):
                mined = mine_hard_negatives(model, dataset, cache, mining_sources, cfg.mining_max_new, mode, normalize)
                if len(mined) == len(cache):
                    break
                cache = mined
                model = trainer.fit(_positive_entries(weak, selections, fixed), cache,
                                    derive_seed(cfg.seed, t, 1000 + r), init_alpha=model.alpha)

            snap = _snapshot()
            stats = score_groups(model, dataset, {i: dataset.bag(i).windows[j] for i, j in snap.items()}, mode, normalize)
            records.append(IterationRecord(
                iteration=t,
                selections=snap,
                n_negatives=len(cache),
                score_stats={g: (s.mean, s.std) for g, s in stats.items()},
            ))
            log.info(f"{label} iteration {t}/{cfg.iterations}: {len(cache)} negatives, gap {model.gap:.1e}")

    if model is None:
        model = LinearModel.zeros(dataset.descriptors(positives[0].image_id, mode, normalize).shape[1])
    traj = RunTrajectory(
        mode=label,
        config=cfg,
        iterations=records,
        model=model,
        audit=audit,
        negatives=cache,
        supervised=supervised,
        reloc_scores=reloc_scores,
    )
    annotate_corloc(traj, dataset)
    return traj


def annotate_corloc(traj: RunTrajectory, dataset: Dataset):
    """Fill per-iteration CorLoc where ground truth is available. Never call while sealed."""
    ids = list(traj.iterations[0].selections)
    if not ids or any(not dataset.bag(i).gt_boxes for i in ids):
        log.info("Ground truth incomplete, CorLoc not computed")
        return
    gts = {i: list(dataset.bag(i).gt_boxes) for i in ids}
    for i, record in enumerate(traj.iterations):
        record.corloc = corloc(traj.selected_windows(dataset, i), gts)
    log.info(f"{traj.mode}: CorLoc {traj.iterations[0].corloc:.3f} -> {traj.iterations[-1].corloc:.3f}")


def run_standard_mil(dataset: Dataset, cfg: MilConfig) -> RunTrajectory:
    return _run(dataset, replace(cfg, k_folds=1), multifold=False, label="standard")


def run_multifold_mil(dataset: Dataset, cfg: MilConfig) -> RunTrajectory:
    if cfg.k_folds < 2:
        raise DataError(f"Multi-fold MIL needs k_folds >= 2, got {cfg.k_folds}")
    return _run(dataset, cfg, multifold=True, label="multifold")


def choose_supervised(dataset: Dataset, fraction: float, seed: int) -> List[str]:
    if not 0.0 <= fraction <= 1.0:
        raise DataError(f"Supervised fraction must be in [0, 1], got {fraction}")
    ids = [b.image_id for b in dataset.positives()]
    n_sup = int(math.floor(fraction * len(ids) + 0.5))
    if fraction > 0 and n_sup == 0:
        n_sup = 1
    if n_sup == 0:
        return []
    picked = np.random.default_rng(seed).choice(len(ids), size=n_sup, replace=False)
    return sorted(ids[i] for i in picked)


def run_mixed(dataset: Dataset, cfg: MilConfig, supervised_fraction: float, sup_seed: int) -> RunTrajectory:
    """Multi-fold MIL where a random share of positives carries box annotations."""
    chosen = choose_supervised(dataset, supervised_fraction, sup_seed)
    log.info(f"Mixed supervision: {len(chosen)} of {len(dataset.positives())} positives fully supervised")
    if not chosen:
        return run_multifold_mil(dataset, cfg)
    return _run(dataset.with_supervision(chosen), cfg, multifold=True, label="mixed")


def train_fully_supervised(dataset: Dataset, cfg: MilConfig) -> RunTrajectory:
    """Positives fixed to their ground-truth boxes, same mining schedule."""
    ids = [b.image_id for b in dataset.positives()]
    return _run(dataset.with_supervision(ids), cfg, multifold=True, label="mixed")


def train_final_detector(dataset: Dataset, windows: Mapping[str, Window], cfg: MilConfig) -> LinearModel:
    """
    Retrain on free windows (e.g. refined boxes) plus their horizontal flips.

    A free window is represented by the candidate it overlaps most.
    """
    if not windows:
        raise DataError("No windows to train the final detector on")
    trainer = _Trainer(dataset, cfg)
    neg_ids = [b.image_id for b in dataset.negatives() if b.windows]
    if not neg_ids:
        raise DataError("Final detector training needs negative images")
    with dataset.sealed():
        positives = [(i, _nearest_candidate(dataset.bag(i), w)) for i, w in sorted(windows.items())]
        cache = NegativeCache((i, _initial_index(dataset.bag(i), cfg.margin)) for i in neg_ids)
        model = trainer.fit(positives, cache, derive_seed(cfg.seed, 0, 0), flips=True)
        for r in range(cfg.mining_rounds):
            mined = mine_hard_negatives(model, dataset, cache, neg_ids, cfg.mining_max_new, cfg.channel_mode, cfg.normalize)
            if len(mined) == len(cache):
                break
            cache = mined
            model = trainer.fit(positives, cache, derive_seed(cfg.seed, 0, 1000 + r), init_alpha=model.alpha, flips=True)
    log.info(f"Final detector trained on {len(positives)} windows (+flips), {len(cache)} negatives")
    return model


def detect(
    model: LinearModel,
    dataset: Dataset,
    image_ids: Optional[Sequence[str]] = None,
    mode: ChannelMode = ChannelMode.FOREGROUND_ONLY,
    normalize: bool = True,
    nms_iou: float = 0.3,
) -> List[Detection]:
    """Score every candidate window and keep non-maximum-suppressed detections."""
    if image_ids is None:
        image_ids = [b.image_id for b in dataset.test_bags()] or [b.image_id for b in dataset.train_bags()]
    dets: List[Detection] = []
    for image_id in image_ids:
        bag = dataset.bag(image_id)
        if not bag.windows:
            continue
        s = window_scores(model, dataset, image_id, mode, normalize)
        for i in nms(bag.windows, s.tolist(), nms_iou):
            dets.append(Detection(image_id=image_id, window=bag.windows[i], confidence=float(s[i])))
    return dets

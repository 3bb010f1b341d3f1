"""
Subcommand handlers for MFMIL.

Each handler takes the Core, the parsed arguments and an async `respond`
callback for user-facing lines. Heavy work runs in a worker thread so the
registry writes stay on the event loop.
"""

import asyncio
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional

from . import __version__
from .artifacts import (
    RunManifest,
    load_model,
    load_scores,
    read_json,
    read_windows,
    save_model,
    save_scores,
    write_csv,
    write_json,
    windows_document,
)
from .dataset import Dataset, dataset_hash, load_dataset, save_dataset
from .errors import DataError, UsageError
from .evaluation import (
    EvalReport,
    Protocol,
    average_precision,
    corloc,
    corloc_upper_bound,
    error_breakdown,
    precision_recall,
    score_histogram,
)
from .features import PairMode, inner_product_histogram
from .geometry import Window
from .mil import (
    MilConfig,
    RunTrajectory,
    detect,
    run_mixed,
    run_multifold_mil,
    run_standard_mil,
    train_final_detector,
    train_fully_supervised,
)
from .refine import refine_selection
from .registry import RunRecord
from .synth import generate, save_truth

log = logging.getLogger(__name__)

DATASET_FILE = "dataset.json"
TRUTH_FILE = "truth.json"

TRAIN_MODES = ("standard", "multifold", "mixed", "supervised")


def _manifest_path(path) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / DATASET_FILE
    if not path.exists():
        raise DataError(f"Dataset manifest {path} not found")
    return path


def _load(path, margin: float) -> Dataset:
    return load_dataset(_manifest_path(path)).filtered(margin)


def _floats(text: str, what: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--{what} expects comma-separated numbers, got '{text}'") from None


async def _record(core, command: str, mode: Optional[str], digest: Optional[str], config: dict, out_dir, metrics) -> Optional[int]:
    if core.registry is None:
        return None
    run_id = await core.registry.record_run(RunRecord(
        command=command, mode=mode, dataset_hash=digest, config=config, output_dir=str(out_dir),
    ))
    await core.registry.record_metrics(run_id, metrics)
    return run_id


class _Run:
    """A trained run directory and everything needed to continue from it."""

    def __init__(self, run_dir):
        self.dir = Path(run_dir)
        self.manifest = RunManifest.read(self.dir)
        if self.manifest.command != "train":
            raise DataError(f"{self.dir} is not a train run directory")
        self.cfg = MilConfig.from_dict(self.manifest.config["mil"])
        self.dataset = _load(self.manifest.dataset, self.cfg.margin)

    def model(self, refined: bool = False):
        if refined and (self.dir / "model_refined.npz").exists():
            return load_model(self.dir / "model_refined.npz")
        return load_model(self.dir / "model.npz")

    def gts(self, image_ids) -> Dict[str, list]:
        return {i: list(self.dataset.bag(i).gt_boxes) for i in image_ids}


async def cmd_gen(core, args, respond):
    """Synthesize a dataset directory: manifest, features, planted truth."""
    manifest = RunManifest(command="gen")
    cfg = core.synth_config(
        n_pos=args.pos, n_neg=args.neg, dim=args.dim,
        signal_strength=args.alpha, snr=args.snr, noise_sigma=args.sigma,
        candidates_per_image=args.candidates, jitter=args.jitter,
        clutter_contours=args.clutter, context=args.context,
        context_signal=args.context_signal, overlap_sharing=args.overlap_sharing, flips=args.flips,
        n_test_pos=args.test_pos, n_test_neg=args.test_neg, seed=args.seed,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset, truth = await asyncio.to_thread(generate, cfg)
    await asyncio.to_thread(save_dataset, dataset, out / DATASET_FILE)
    save_truth(truth, out / TRUTH_FILE)
    digest = dataset_hash(out / DATASET_FILE)

    manifest.config = {"synth": asdict(cfg)}
    manifest.seeds = {"seed": cfg.seed}
    manifest.dataset = str((out / DATASET_FILE).resolve())
    manifest.dataset_hash = digest
    manifest.finish([DATASET_FILE, "features.milf", TRUTH_FILE])
    manifest.write(out)
    await respond(f"Generated {len(dataset)} images (dim {cfg.dim}) in {out}")
    await respond(f"sha256 {digest}")


def _train(dataset: Dataset, cfg: MilConfig, mode: str, sup_fraction: float, sup_seed: int) -> RunTrajectory:
    if mode == "standard":
        return run_standard_mil(dataset, cfg)
    if mode == "multifold":
        return run_multifold_mil(dataset, cfg)
    if mode == "mixed":
        return run_mixed(dataset, cfg, sup_fraction, sup_seed)
    if mode == "supervised":
        return train_fully_supervised(dataset, cfg)
    raise UsageError(f"Unknown training mode '{mode}'")


async def cmd_train(core, args, respond):
    """Run a MIL training loop and write its run directory."""
    manifest = RunManifest(command="train")
    cfg = core.mil_config(
        train_overrides={"c": args.c},
        k_folds=args.k, iterations=args.iters, channel_mode=args.channels,
        seed=args.seed, margin=args.margin, mining_rounds=args.mining_rounds,
        mining_max_new=args.max_new, flip_positives=args.flips,
    )
    manifest_path = _manifest_path(args.dataset)
    dataset = _load(manifest_path, cfg.margin)
    digest = dataset_hash(manifest_path)

    traj = await asyncio.to_thread(_train, dataset, cfg, args.mode, args.sup_fraction, args.sup_seed)
    # standard MIL re-localizes with the detector trained on the same images
    held_out = traj.mode != "standard"
    violations = traj.fold_violations() if held_out else []
    if violations or dataset.guard.violations:
        raise DataError(f"Weak supervision audit failed: {len(violations)} fold violations, "
                        f"{len(dataset.guard.violations)} ground-truth reads")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    final = traj.iterations[-1]
    write_json(out / "trajectory.json", traj.to_dict())
    write_csv(out / "corloc.csv", ["iteration", "corloc", "n_negatives", "selected_mean", "overlapping_mean", "other_mean"], [
        (r.iteration, r.corloc, r.n_negatives,
         *[r.score_stats[g][0] if g in r.score_stats else None for g in ("selected", "overlapping", "other")])
        for r in traj.iterations
    ])
    write_json(out / "selections.json", windows_document(traj.selected_windows(dataset), final.selections))
    write_json(out / "audit.json", {
        "folds": traj.to_dict()["audit"],
        "fold_violations": len(violations),
        "fold_exclusion": held_out,
        "ground_truth_reads": list(dataset.guard.violations),
        "supervised": list(traj.supervised),
    })
    save_model(out / "model.npz", traj.model)
    save_scores(out / "reloc_scores.npz", traj.reloc_scores)

    manifest.config = {"mil": cfg.to_dict(), "mode": args.mode, "sup_fraction": args.sup_fraction, "sup_seed": args.sup_seed}
    manifest.seeds = {"seed": cfg.seed, "sup_seed": args.sup_seed}
    manifest.dataset = str(manifest_path.resolve())
    manifest.dataset_hash = digest
    manifest.finish(["trajectory.json", "corloc.csv", "selections.json", "audit.json", "model.npz", "reloc_scores.npz"])
    manifest.write(out)

    metrics = [(r.iteration, "corloc", r.corloc) for r in traj.iterations if r.corloc is not None]
    if cfg.iterations >= 1 and traj.weak_ids():
        metrics.append((None, "unchanged_fraction", traj.unchanged_fraction(1, -1)))
    await _record(core, "train", args.mode, digest, manifest.config, out, metrics)

    curve = " ".join("-" if c is None else f"{c:.3f}" for c in traj.corloc_curve())
    await respond(f"{args.mode} MIL: {cfg.iterations} iterations, {final.n_negatives} negatives")
    await respond(f"CorLoc per iteration: {curve}")


async def cmd_refine(core, args, respond):
    """Fuse classifier and objectness scores, then retrain on the refined windows."""
    run = _Run(args.run_dir)
    manifest = RunManifest(command="refine", dataset=run.manifest.dataset, dataset_hash=run.manifest.dataset_hash)
    rcfg = core.refine_config(
        top_n=args.top_n, w_cls=args.w_cls, w_obj=args.w_obj, kappa=args.kappa,
        search=False if args.no_search else None,
    )
    scores = None
    if (run.dir / "reloc_scores.npz").exists():
        scores = load_scores(run.dir / "reloc_scores.npz")
    cfg = run.cfg
    result = await asyncio.to_thread(
        refine_selection, run.model(), run.dataset, rcfg, cfg.channel_mode, cfg.normalize, scores, core.threads,
    )
    final = await asyncio.to_thread(train_final_detector, run.dataset, result.windows, cfg)

    write_json(run.dir / "refined.json", {
        "windows": windows_document(result.windows, result.provenance),
        "combined": dict(sorted(result.combined.items())),
        "cls_range": list(result.cls_range),
        "obj_range": list(result.obj_range),
    })
    columns = ["image_id", "window", "cls", "obj", "cls_scaled", "obj_scaled", "combined"]
    write_csv(run.dir / "refine.csv", columns + ["x0", "y0", "x1", "y1"],
              ([row[c] for c in columns] + row["box"] for row in result.considered))
    save_model(run.dir / "model_refined.npz", final)

    manifest.config = {"refine": asdict(rcfg), "mil": cfg.to_dict()}
    manifest.seeds = {"seed": cfg.seed}
    manifest.finish(["refined.json", "refine.csv", "model_refined.npz"])
    manifest.write(run.dir, "refine_manifest.json")
    await _record(core, "refine", run.manifest.config.get("mode"), run.manifest.dataset_hash, manifest.config, run.dir, [
        (None, "n_refined", len(result.windows)),
    ])
    moved = sum(run.dataset.bag(i).windows[result.provenance[i]] != w for i, w in result.windows.items())
    await respond(f"Refined {len(result.windows)} images ({moved} moved by local search), detector retrained")


async def cmd_eval(core, args, respond):
    """CorLoc, error modes and detection AP for a run directory."""
    run = _Run(args.run_dir)
    manifest = RunManifest(command="eval", dataset=run.manifest.dataset, dataset_hash=run.manifest.dataset_hash)
    protocol = Protocol(args.protocol)
    dataset, cfg = run.dataset, run.cfg

    selections = read_windows(run.dir / "selections.json")
    gts = run.gts(selections)
    modes = error_breakdown(selections, gts)
    refined_corloc = None
    if (run.dir / "refined.json").exists():
        refined = read_json(run.dir / "refined.json")["windows"]
        refined_corloc = corloc({i: Window(*e["box"]) for i, e in refined.items()}, gts)

    eval_bags = dataset.test_bags() or dataset.train_bags()
    image_ids = [b.image_id for b in eval_bags]
    dets = await asyncio.to_thread(
        detect, run.model(refined=True), dataset, image_ids, cfg.channel_mode, cfg.normalize, args.nms,
    )
    det_gts = {b.image_id: list(b.gt_boxes) for b in eval_bags}
    ap = average_precision(dets, det_gts, protocol)
    precision, recall, _ = precision_recall(dets, det_gts)

    trajectory = read_json(run.dir / "trajectory.json")
    report = EvalReport(
        corloc=corloc(selections, gts),
        ap=ap,
        protocol=protocol,
        error_mode_freqs={m.value: f for m, f in modes.items()},
        corloc_trajectory=[r["corloc"] for r in trajectory["iterations"]],
        n_images=len(selections),
        upper_bound_corloc=corloc_upper_bound(dataset),
        refined_corloc=refined_corloc,
    )
    write_json(run.dir / "eval_report.json", report.to_dict())
    ranked = sorted(dets, key=lambda d: (-d.confidence, d.image_id, d.window.as_tuple()))
    write_csv(run.dir / "pr_curve.csv", ["rank", "image_id", "confidence", "precision", "recall"], [
        (k + 1, d.image_id, d.confidence, float(p), float(r))
        for k, (d, p, r) in enumerate(zip(ranked, precision, recall))
    ])

    manifest.config = {"protocol": protocol.value, "nms": args.nms, "mil": cfg.to_dict()}
    manifest.finish(["eval_report.json", "pr_curve.csv"])
    manifest.write(run.dir, "eval_manifest.json")
    metrics = [(None, "corloc", report.corloc), (None, "ap", ap), (None, "upper_bound_corloc", report.upper_bound_corloc)]
    if refined_corloc is not None:
        metrics.append((None, "refined_corloc", refined_corloc))
    metrics.extend((None, f"error_{m}", f) for m, f in report.error_mode_freqs.items())
    await _record(core, "eval", run.manifest.config.get("mode"), run.manifest.dataset_hash, manifest.config, run.dir, metrics)

    await respond(f"CorLoc {report.corloc:.3f} (upper bound {report.upper_bound_corloc:.3f})"
                  + ("" if refined_corloc is None else f", refined {refined_corloc:.3f}"))
    await respond(f"AP ({protocol.value}) {ap:.3f} over {len(image_ids)} images")
    await respond("Error modes: " + ", ".join(f"{m} {f:.2f}" for m, f in report.error_mode_freqs.items()))


async def _diag_score_hist(core, args, respond):
    run = _Run(args.target)
    model = run.model()
    selections = read_windows(run.dir / "selections.json")
    hist = await asyncio.to_thread(
        score_histogram, model, run.dataset, selections, args.bins, run.cfg.channel_mode, run.cfg.normalize,
    )
    out = Path(args.out) if args.out else run.dir / "score_hist.csv"
    groups = list(hist.counts)
    write_csv(out, ["bin_lo", "bin_hi"] + groups, [
        [float(hist.edges[i]), float(hist.edges[i + 1])] + [int(hist.counts[g][i]) for g in groups]
        for i in range(len(hist.edges) - 1)
    ])
    for g, st in hist.stats.items():
        await respond(f"{g}: n={st.scores.size} mean={st.mean:.3f} std={st.std:.3f}")


async def _diag_dot_hist(core, args, respond):
    cfg = core.mil_config(channel_mode=args.channels)
    dataset = _load(args.target, cfg.margin)
    hist = await asyncio.to_thread(
        inner_product_histogram, dataset, PairMode(args.pairs), args.sample, args.bins, args.seed or 0, cfg.channel_mode, args.radius,
    )
    if args.out:
        write_csv(args.out, ["bin_lo", "bin_hi", "count"], [
            (float(hist.edges[i]), float(hist.edges[i + 1]), int(hist.counts[i])) for i in range(len(hist.counts))
        ])
    await respond(f"{hist.n_pairs} pairs, mean {hist.mean:.4f}, {hist.near_orthogonal_fraction:.4f} within |p| < {hist.radius}")


def _sweep(dataset: Dataset, configs: List[MilConfig], multifold: bool) -> List[RunTrajectory]:
    run = run_multifold_mil if multifold else run_standard_mil
    return [run(dataset, cfg) for cfg in configs]


async def _diag_c_sweep(core, args, respond):
    cs = _floats(args.cs, "cs")
    configs = [core.mil_config(train_overrides={"c": c}, iterations=args.iters, seed=args.seed, channel_mode=args.channels) for c in cs]
    dataset = _load(args.target, configs[0].margin)
    trajs = await asyncio.to_thread(_sweep, dataset, configs, False)
    rows = []
    for c, traj in zip(cs, trajs):
        unchanged = traj.unchanged_fraction(1, -1) if len(traj.iterations) > 1 else None
        rows.append((c, unchanged, traj.iterations[-1].corloc))
        await respond(f"C={c:g}: unchanged {unchanged}, final CorLoc {traj.iterations[-1].corloc}")
    if args.out:
        write_csv(args.out, ["c", "unchanged_fraction", "final_corloc"], rows)


async def _diag_k_sweep(core, args, respond):
    ks = [int(k) for k in _floats(args.ks, "ks")]
    configs = [core.mil_config(k_folds=k, iterations=args.iters, seed=args.seed, channel_mode=args.channels) for k in ks]
    dataset = _load(args.target, configs[0].margin)
    trajs = await asyncio.to_thread(_sweep, dataset, configs, True)
    rows = []
    for k, traj in zip(ks, trajs):
        rows.append((k, traj.iterations[-1].corloc, traj.unchanged_fraction(1, -1) if len(traj.iterations) > 1 else None))
        await respond(f"K={k}: final CorLoc {traj.iterations[-1].corloc}")
    if args.out:
        write_csv(args.out, ["k", "final_corloc", "unchanged_fraction"], rows)


DIAGNOSTICS = {
    'score-hist': _diag_score_hist,
    'dot-hist': _diag_dot_hist,
    'c-sweep': _diag_c_sweep,
    'k-sweep': _diag_k_sweep,
}


async def cmd_diag(core, args, respond):
    handler = DIAGNOSTICS.get(args.diag)
    if handler is None:
        raise UsageError(f"Unknown diagnostic '{args.diag}'")
    await handler(core, args, respond)


async def cmd_report(core, args, respond):
    """Aggregate registered runs' metrics into one CSV, optionally clearing the registry afterwards."""
    if core.registry is None:
        raise UsageError("report reads the run registry, drop --no-registry")
    if args.run is not None and await core.registry.get_run(args.run) is None:
        raise DataError(f"No run {args.run} in the registry")
    rows = await core.registry.report(command=args.run_command, run_id=args.run)
    columns = ["run_id", "command", "mode", "dataset_hash", "output_dir", "created_at", "iteration", "name", "value"]
    write_csv(args.out, columns, ([r[c] for c in columns] for r in rows))
    runs = len({r["run_id"] for r in rows})
    await respond(f"Wrote {len(rows)} metric rows from {runs} runs to {args.out}")
    if args.reset:
        await core.registry.reset()
        await respond("Registry cleared")



async def cmd_version(core, args, respond):
    await respond(f"MFMIL {__version__}")


COMMANDS = {
    'gen': cmd_gen,
    'train': cmd_train,
    'refine': cmd_refine,
    'eval': cmd_eval,
    'diag': cmd_diag,
    'report': cmd_report,
    'version': cmd_version,
}

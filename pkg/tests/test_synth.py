import json

import numpy as np
import pytest

from src.dataset import dataset_hash, manifest_document, save_dataset
from src.errors import DataError
from src.features import ChannelMode
from src.geometry import Window, initial_window, iou, margin_filter
from src.refine import objectness
from src.synth import SynthConfig, _cell_weights, generate, save_truth


def tiny(**kw):
    base = dict(n_pos=4, n_neg=3, dim=16, candidates_per_image=10, jitter_copies=1, seed=5)
    base.update(kw)
    return SynthConfig(**base)


def test_generation_is_deterministic(tmp_path):
    a, ta = generate(tiny())
    b, tb = generate(tiny())
    assert np.array_equal(np.asarray(a.store.matrix), np.asarray(b.store.matrix))
    assert manifest_document(a, "f.milf") == manifest_document(b, "f.milf")
    assert ta.to_dict() == tb.to_dict()
    save_dataset(a, tmp_path / "a" / "dataset.json")
    save_dataset(b, tmp_path / "b" / "dataset.json")
    assert dataset_hash(tmp_path / "a" / "dataset.json") == dataset_hash(tmp_path / "b" / "dataset.json")
    c, _ = generate(tiny(seed=6))
    assert not np.array_equal(np.asarray(a.store.matrix), np.asarray(c.store.matrix))


def test_candidates_and_truth(small_synth):
    dataset, truth, cfg = small_synth
    start = initial_window(cfg.margin)
    for bag in dataset.bags:
        assert bag.windows[0] == start
        assert margin_filter(bag.windows, cfg.margin) == list(bag.windows)
        assert len(bag.windows) == cfg.candidates_per_image
        q = truth.quality[bag.image_id]
        if bag.is_positive:
            assert 1 <= len(bag.gt_boxes) <= cfg.max_objects
            assert {bag.windows[i] for i in truth.planted[bag.image_id]} == set(bag.gt_boxes)
            for w, qw in zip(bag.windows, q):
                assert qw == pytest.approx(max(iou(w, g) for g in bag.gt_boxes))
        else:
            assert truth.planted[bag.image_id] == []
            assert q == [0.0] * len(bag.windows)


def test_planted_boxes_carry_their_contours(small_synth):
    dataset, _, cfg = small_synth
    for bag in dataset.positives():
        assert len(bag.edge_groups) == len(bag.gt_boxes) + cfg.clutter_contours
        for group, box in zip(bag.edge_groups, bag.gt_boxes):
            pts = group.points
            assert (pts[:, 0].min(), pts[:, 1].min()) == pytest.approx((box.x0, box.y0))
            assert (pts[:, 0].max(), pts[:, 1].max()) == pytest.approx((box.x1, box.y1))


def test_planted_windows_carry_class_evidence():
    dataset, truth = generate(tiny(n_pos=20, n_neg=20, dim=256, seed=9))
    planted, background = [], []
    for bag in dataset.positives():
        X = dataset.descriptors(bag.image_id, ChannelMode.FOREGROUND_ONLY, normalize=False)
        for i, q in enumerate(truth.quality[bag.image_id]):
            if q == 1.0:
                planted.append(X[i])
            elif q == 0.0:
                background.append(X[i])
    # planted rows share a direction that pure noise rows do not
    direction = np.mean(planted, axis=0)
    assert np.mean(np.asarray(planted) @ direction) > np.mean(np.asarray(background) @ direction) + 1.0


def test_signal_strength_scaling():
    assert SynthConfig(dim=400).alpha == pytest.approx(0.28 * 20)
    assert SynthConfig(dim=400).beta == pytest.approx(4.0 * 20)
    assert SynthConfig(dim=400, signal_strength=3.0).alpha == 3.0


def test_config_validation():
    with pytest.raises(DataError):
        SynthConfig(dim=1)
    with pytest.raises(DataError):
        SynthConfig(n_neg=0)
    with pytest.raises(DataError):
        SynthConfig(candidates_per_image=8)
    with pytest.raises(DataError):
        SynthConfig(context="elsewhere")
    with pytest.raises(DataError):
        SynthConfig(margin=0.3)
    with pytest.raises(DataError):
        SynthConfig(overlap_sharing=1.0)


def test_context_modes():
    full, _ = generate(tiny(context="full"))
    for bag in full.bags:
        assert len({r.bg for r in bag.refs}) == 1
    bare, _ = generate(tiny(context="none"))
    assert all(r.bg is None for bag in bare.bags for r in bag.refs)
    with pytest.raises(DataError):
        bare.descriptors("pos_0000", ChannelMode.FOREGROUND_PLUS_BACKGROUND)
    comp, _ = generate(tiny())
    assert comp.descriptors("pos_0000", ChannelMode.FOREGROUND_PLUS_CONTRASTIVE).shape == (10, 32)


def test_flips_and_test_split():
    ds, truth = generate(tiny(flips=True, n_test_pos=2, n_test_neg=1))
    assert all(bag.has_flips for bag in ds.bags)
    a = ds.descriptors("pos_0000", ChannelMode.FOREGROUND_ONLY)
    b = ds.descriptors("pos_0000", ChannelMode.FOREGROUND_ONLY, flip=True)
    assert a.shape == b.shape and not np.array_equal(a, b)
    assert [bag.image_id for bag in ds.test_bags()] == ["test_pos_0000", "test_pos_0001", "test_neg_0000"]
    assert len(ds.train_bags()) == 7
    assert "test_pos_0001" in truth.planted


def test_save_truth(tmp_path):
    _, truth = generate(tiny())
    save_truth(truth, tmp_path / "truth.json")
    doc = json.loads((tmp_path / "truth.json").read_text())
    assert doc["config"]["seed"] == 5
    assert sorted(doc["images"]) == sorted(truth.planted)


def test_overlapping_windows_share_noise():
    dataset, _ = generate(tiny(n_pos=1, n_neg=1, dim=4000, context="none", overlap_sharing=0.5))
    bag = dataset.bag("neg_0000")
    X = dataset.descriptors("neg_0000", ChannelMode.FOREGROUND_ONLY, normalize=False).astype(np.float64)
    cells = _cell_weights(list(bag.windows))
    expected = 0.5 * cells @ cells.T + 0.5 * np.eye(len(bag.windows))
    assert np.abs(X @ X.T / 4000 - expected).max() < 0.1
    # the full-image window overlaps everything
    assert expected[0, 1:].min() > 0.0

    independent, _ = generate(tiny(n_pos=1, n_neg=1, dim=4000, context="none", overlap_sharing=0.0))
    Y = independent.descriptors("neg_0000", ChannelMode.FOREGROUND_ONLY, normalize=False).astype(np.float64)
    gram = Y @ Y.T / 4000
    assert np.abs(gram - np.diag(np.diag(gram))).max() < 0.1


def test_complement_context_carries_no_class_evidence():
    dataset, _ = generate(tiny(n_pos=20, n_neg=20, dim=256, snr=1.0, context="complement", seed=3))
    rows = {True: [], False: []}
    for bag in dataset.bags:
        X = dataset.descriptors(bag.image_id, ChannelMode.FOREGROUND_PLUS_BACKGROUND, normalize=False)
        rows[bag.is_positive].append(X[:, 256:])
    pos, neg = np.vstack(rows[True]), np.vstack(rows[False])
    gap = pos.mean(axis=0) - neg.mean(axis=0)
    # the class means of background rows differ only by sampling noise
    assert np.linalg.norm(gap) < 0.25 * np.sqrt(256)


def test_clutter_is_weaker_than_objects(small_synth):
    dataset, _, cfg = small_synth
    for bag in dataset.positives():
        objects = bag.edge_groups[: len(bag.gt_boxes)]
        clutter = bag.edge_groups[len(bag.gt_boxes):]
        weakest = min(g.strength for g in objects)
        assert all(g.strength < 0.15 * weakest for g in clutter)
        if len(bag.gt_boxes) > 1:
            continue
        for box in bag.gt_boxes:
            grown = Window(
                max(box.x0 - 0.05, 0.0), max(box.y0 - 0.05, 0.0),
                min(box.x1 + 0.05, 1.0), min(box.y1 + 0.05, 1.0),
            )
            assert objectness(box, bag.edge_groups) > objectness(grown, bag.edge_groups)

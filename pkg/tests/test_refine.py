import numpy as np
import pytest

from src.errors import DataError
from src.geometry import Window, iou
from src.refine import EdgeGroup, RefineConfig, greedy_refine, objectness, refine_selection, scale_unit
from src.svm import LinearModel
from tests.conftest import hand_dataset


def rectangle(box, per_side=8, contour_id=0):
    x0, y0, x1, y1 = box.as_tuple()
    t = np.linspace(0.0, 1.0, per_side, endpoint=False)
    pts = np.vstack([
        np.column_stack([x0 + t * (x1 - x0), np.full(per_side, y0)]),
        np.column_stack([np.full(per_side, x1), y0 + t * (y1 - y0)]),
        np.column_stack([x1 - t * (x1 - x0), np.full(per_side, y1)]),
        np.column_stack([np.full(per_side, x0), y1 - t * (y1 - y0)]),
    ])
    return EdgeGroup(contour_id=contour_id, points=pts, strength=2.0 * (box.width + box.height))


def test_objectness_of_an_enclosed_contour():
    box = Window(0.3, 0.3, 0.7, 0.7)
    edges = [rectangle(box)]
    assert objectness(box, edges) == pytest.approx(1.6 / 1.6 ** 1.5)
    # cutting through the contour is penalized down to zero
    assert objectness(Window(0.5, 0.3, 0.9, 0.7), edges) == 0.0
    assert objectness(box, []) == 0.0
    # a looser window around the same contour scores lower
    assert objectness(Window(0.2, 0.2, 0.8, 0.8), edges) < objectness(box, edges)


def test_greedy_refine_never_lowers_objectness():
    rng = np.random.default_rng(4)
    for trial in range(40):
        edges = [
            EdgeGroup(contour_id=k, points=rng.uniform(0.05, 0.95, (5, 2)), strength=float(rng.uniform(0.1, 2.0)))
            for k in range(4)
        ]
        x0, x1 = np.sort(rng.uniform(0.05, 0.95, 2))
        y0, y1 = np.sort(rng.uniform(0.05, 0.95, 2))
        if x1 - x0 < 0.05 or y1 - y0 < 0.05:
            continue
        start = Window(float(x0), float(y0), float(x1), float(y1))
        out = greedy_refine(start, edges, RefineConfig())
        assert objectness(out, edges) >= objectness(start, edges)


def test_greedy_refine_without_edges_is_identity():
    w = Window(0.2, 0.2, 0.4, 0.4)
    assert greedy_refine(w, [], RefineConfig()) == w


def test_greedy_refine_recovers_perturbed_boxes():
    rng = np.random.default_rng(2024)
    trials, hits = 200, 0
    for _ in range(trials):
        w, h = rng.uniform(0.25, 0.5, 2)
        x0 = rng.uniform(0.05, 0.95 - w)
        y0 = rng.uniform(0.05, 0.95 - h)
        box = Window(float(x0), float(y0), float(x0 + w), float(y0 + h))
        dx, dy = rng.uniform(-0.1, 0.1, 2) * (w, h)
        grow = rng.uniform(0.0, 0.1, 4) * (w, h, w, h)
        start = Window(
            float(max(x0 + dx - grow[0], 0.0)),
            float(max(y0 + dy - grow[1], 0.0)),
            float(min(x0 + w + dx + grow[2], 1.0)),
            float(min(y0 + h + dy + grow[3], 1.0)),
        )
        out = greedy_refine(start, [rectangle(box)], RefineConfig())
        hits += iou(out, box) >= 0.9
    assert hits >= 0.95 * trials


def test_scale_unit():
    assert scale_unit([1.0, 3.0, 2.0]) == [0.0, 1.0, 0.5]
    assert scale_unit([4.0, 4.0]) == [0.5, 0.5]
    with pytest.raises(DataError):
        scale_unit([])


def test_refine_config_validation():
    with pytest.raises(DataError):
        RefineConfig(top_n=0)
    with pytest.raises(DataError):
        RefineConfig(w_cls=0.0, w_obj=0.0)
    with pytest.raises(DataError):
        RefineConfig(min_step=0.1, initial_step=0.05)


def fusion_dataset():
    target = Window(0.3, 0.3, 0.6, 0.6)
    windows = [Window(0.1, 0.1, 0.35, 0.35), Window(0.1, 0.1, 0.9, 0.9), target]
    return hand_dataset([
        ("p", "positive", windows, [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]], {"edge_groups": (rectangle(target),)}),
        ("n", "negative", windows[:1], [[0.0, 1.0]], {}),
    ])


def test_fusion_weights_pick_the_extremes():
    ds = fusion_dataset()
    model = LinearModel(w=np.array([1.0, -1.0]), b=0.0)
    scores = {"p": np.array([3.0, 1.0, 2.0])}

    by_cls = refine_selection(model, ds, RefineConfig(w_cls=1.0, w_obj=0.0, search=False), scores=scores)
    assert by_cls.provenance == {"p": 0}
    assert by_cls.cls_range == (1.0, 3.0)

    by_obj = refine_selection(model, ds, RefineConfig(w_cls=0.0, w_obj=1.0, search=False), scores=scores)
    assert by_obj.provenance == {"p": 2}
    assert by_obj.windows["p"] == Window(0.3, 0.3, 0.6, 0.6)
    assert by_obj.combined["p"] == 1.0
    assert len(by_obj.considered) == 3


def test_top_n_limits_the_candidates():
    ds = fusion_dataset()
    model = LinearModel(w=np.array([1.0, -1.0]), b=0.0)
    scores = {"p": np.array([3.0, 1.0, 2.0])}
    res = refine_selection(model, ds, RefineConfig(top_n=1, w_cls=0.0, w_obj=1.0, search=False), scores=scores)
    assert res.provenance == {"p": 0}


def test_a_part_of_the_object_grows_to_the_whole():
    cat = Window(0.3, 0.3, 0.7, 0.8)
    head = Window(0.3, 0.3, 0.5, 0.45)
    ds = hand_dataset([
        ("p", "positive", [Window(0.04, 0.04, 0.96, 0.96), head], [[0.0, 1.0], [1.0, 0.0]],
         {"ground_truth": (cat,), "edge_groups": (rectangle(cat),)}),
        ("n", "negative", [head], [[0.0, 1.0]], {}),
    ])
    model = LinearModel(w=np.array([1.0, -1.0]), b=0.0)
    # the classifier is most confident on the head alone
    res = refine_selection(model, ds, RefineConfig(top_n=1))
    assert res.provenance == {"p": 1}
    assert iou(head, cat) < 0.5
    assert iou(res.windows["p"], cat) >= 0.9


def test_refine_scores_with_the_model_when_needed():
    ds = fusion_dataset()
    model = LinearModel(w=np.array([1.0, -1.0]), b=0.0)
    res = refine_selection(model, ds, RefineConfig(w_cls=1.0, w_obj=0.0, search=False))
    assert res.provenance == {"p": 0}
    with pytest.raises(DataError):
        refine_selection(model, ds, RefineConfig(), scores={"p": np.zeros(2)})
    with pytest.raises(DataError):
        refine_selection(LinearModel(w=np.zeros(3), b=0.0), ds, RefineConfig())

import numpy as np
import pytest

from src.dataset import Bag, Dataset, FeatureStore, WindowRef
from src.geometry import Window
from src.synth import SynthConfig, generate


def hand_dataset(images, dim=None):
    """
    Build a Dataset from (image_id, label, windows, fg_rows, extras) tuples.

    fg_rows is one feature row per window; extras may carry ground_truth,
    supervision, split, edge_groups and bg_rows.
    """
    rows = []
    bags = []
    for image_id, label, windows, fg_rows, extras in images:
        fg_rows = np.asarray(fg_rows, dtype=np.float32).reshape(len(windows), -1)
        bg_rows = extras.pop("bg_rows", None)
        refs = []
        for k in range(len(windows)):
            fg = len(rows)
            rows.append(fg_rows[k])
            bg = None
            if bg_rows is not None:
                bg = len(rows)
                rows.append(np.asarray(bg_rows[k], dtype=np.float32))
            refs.append(WindowRef(fg=fg, bg=bg))
        bags.append(Bag(image_id=image_id, label=label, windows=tuple(windows), refs=tuple(refs), **extras))
    if not rows:
        rows = [np.zeros(dim or 1, dtype=np.float32)]
    return Dataset(bags, FeatureStore(np.vstack(rows)))


@pytest.fixture
def two_window_dataset():
    """One positive image with a good and a bad window, one negative image."""
    good = Window(0.2, 0.2, 0.6, 0.6)
    full = Window(0.04, 0.04, 0.96, 0.96)
    return hand_dataset([
        ("p0", "positive", [full, good], [[0.2, 1.0], [1.0, 0.1]], {"ground_truth": (good,)}),
        ("n0", "negative", [full, Window(0.1, 0.1, 0.3, 0.3)], [[0.1, 1.0], [-0.5, 1.0]], {}),
    ])


@pytest.fixture(scope="session")
def small_synth():
    cfg = SynthConfig(n_pos=12, n_neg=8, dim=32, candidates_per_image=12, jitter_copies=1, seed=7)
    dataset, truth = generate(cfg)
    return dataset, truth, cfg


@pytest.fixture
def fast_params():
    from src.svm import TrainParams
    return TrainParams(c=1.0, tol=1e-3, max_epochs=300)

"""Shared tiny fixtures: a small benchmark and a briefly trained model.

Unit tests run on a reduced geometry (32x48 images, 2x3 grid) so the whole
suite outside the acceptance module stays fast on two CPU threads.
"""

import numpy as np
import pytest
import torch

from advfusion.anchors import anchors_from_samples
from advfusion.data import SceneConfig, make_dataset
from advfusion.detector import ModelConfig, build_model, freeze_model, train_baseline

torch.set_num_threads(2)

TINY_SCENE = SceneConfig(
    height=32,
    width=48,
    sequence_length=4,
    num_keyframes=5,
    frame_stride=2.0,
    car_count=(1, 2),
    ped_count=(0, 1),
    distractor_count=(0, 1),
)

TINY_MODEL = ModelConfig(
    frames=4,
    num_classes=2,
    num_anchors=4,
    image_size=(32, 48),
    stem_widths=(4, 8, 12, 16),
    trunk_blocks=1,
    seed=0,
)


@pytest.fixture(scope="session")
def tiny_train():
    return make_dataset(10, base_seed=100, config=TINY_SCENE)


@pytest.fixture(scope="session")
def tiny_val():
    return make_dataset(4, base_seed=900, config=TINY_SCENE)


@pytest.fixture(scope="session")
def tiny_anchors(tiny_train):
    return anchors_from_samples(tiny_train, k=4, seed=0)


@pytest.fixture(scope="session")
def tiny_model(tiny_train, tiny_anchors):
    model = build_model(TINY_MODEL)
    model, _ = train_baseline(model, tiny_train, tiny_anchors, epochs=8, seed=0)
    return freeze_model(model)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)

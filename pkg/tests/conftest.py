import numpy as np
import pytest

from amdistill.data import synth_dataset
from amdistill.nn import ModelSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data():
    """Four classes of 8x8 images; big enough to learn in a couple of epochs."""
    kw = dict(num_classes=4, image_size=8, noise=0.3, distractors=1)
    train = synth_dataset(n_per_class=12, split="train", **kw)
    test = synth_dataset(n_per_class=6, split="test", **kw)
    return train, test


@pytest.fixture
def tiny_specs():
    teacher = ModelSpec(depth=10, width=2, num_classes=4, input_shape=(3, 8, 8), base_width=4)
    student = ModelSpec(depth=10, width=1, num_classes=4, input_shape=(3, 8, 8), base_width=4)
    return teacher, student

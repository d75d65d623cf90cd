"""Shared builders for the test modules: tiny datasets, tiny models, and
one session-scoped synthetic fashion directory."""

import numpy as np
import pytest

import synth_fashion
from advbench.autodiff import Tensor
from advbench.data import Dataset
from advbench.nn import ModelConfig, Module, build_model


def make_dataset(images, labels, *, name="toy", num_classes=None, split="test"):
    """Wrap arrays as a Dataset, coercing to the loader dtypes."""
    images = np.ascontiguousarray(images, dtype=np.float32)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(name=name, images=images, labels=labels,
                   num_classes=num_classes, split=split)


def toy_blobs(count=48, seed=0, side=8):
    """Two linearly separable classes on a small canvas: class 0 lights
    the upper-left quadrant, class 1 the lower-right."""
    rng = np.random.default_rng(seed)
    half = side // 2
    images = np.zeros((count, 1, side, side), dtype=np.float32)
    labels = (np.arange(count) % 2).astype(np.int64)
    for i, label in enumerate(labels):
        canvas = rng.uniform(0.0, 0.15, size=(side, side))
        if label == 0:
            canvas[:half, :half] += 0.8
        else:
            canvas[half:, half:] += 0.8
        images[i, 0] = np.clip(canvas, 0.0, 1.0)
    return images, labels


def blob_datasets(train_count=48, test_count=16, seed=0, side=8):
    train_images, train_labels = toy_blobs(train_count, seed, side)
    test_images, test_labels = toy_blobs(test_count, seed + 1, side)
    train = make_dataset(train_images, train_labels, name="blobs",
                         num_classes=2, split="train")
    test = make_dataset(test_images, test_labels, name="blobs",
                        num_classes=2, split="test")
    return train, test


def tiny_resnet_config(**overrides):
    base = dict(family="resnet", stages=((1, 4),), block_kind="basic",
                num_classes=2, input_channels=1, input_size=8)
    base.update(overrides)
    return ModelConfig(**base)


def small_classifier(seed=0, **overrides):
    """A one-block residual net over 8x8 single-channel inputs."""
    return build_model(tiny_resnet_config(**overrides), seed=seed)


class LinearTwoClass(Module):
    """Flat two-feature inputs, logits [0, w . x]. For label 0 the cross
    entropy gradient with respect to the input row is sigmoid(w . x) * w,
    which makes attack arithmetic checkable by hand."""

    def __init__(self, w=(1.0, -2.0)):
        super().__init__()
        self.weight = Tensor(
            np.array([[0.0, w[0]], [0.0, w[1]]], dtype=np.float64), requires_grad=True
        )

    def forward(self, x):
        return x @ self.weight


class ConstantLogits(Module):
    """Ignores its input apart from the batch size; always argmaxes to
    ``winner``."""

    def __init__(self, num_classes=10, winner=0):
        super().__init__()
        row = np.zeros(num_classes, dtype=np.float32)
        row[winner] = 1.0
        self.row = row

    def forward(self, x):
        n = x.shape[0]
        return Tensor(np.tile(self.row, (n, 1)))


@pytest.fixture(scope="session")
def fashion_root(tmp_path_factory):
    """A small synthetic fashion dataset laid out like the real archive."""
    root = tmp_path_factory.mktemp("fashion") / "fashion-mnist"
    synth_fashion.write_fashion_dir(root, train_count=400, test_count=120, seed=11)
    return root

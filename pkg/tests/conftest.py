"""Shared fixtures: a real handwritten-digit dataset staged as IDX files.

The 8x8 grayscale scans from scikit-learn are written through the
package's own IDX writer once per session, at native resolution for the
conv models and nearest-resampled to 28x28 for the 784-input perceptron.
"""

import numpy as np
import pytest
from sklearn.datasets import load_digits

from pgate.data import load_dataset, resize_nearest, save_idx_images, save_idx_labels

TRAIN_COUNT = 1437  # of 1797 total; the rest is the evaluation split


@pytest.fixture(scope="session")
def digits_raw():
    bunch = load_digits()
    # source pixels are 0..16; stretch to the full uint8 range
    images = np.floor(bunch.images * (255.0 / 16.0) + 0.5).astype(np.uint8)
    labels = bunch.target.astype(np.uint8)
    order = np.random.default_rng(1234).permutation(images.shape[0])
    return images[order], labels[order]


@pytest.fixture(scope="session")
def idx_dir(tmp_path_factory, digits_raw):
    images, labels = digits_raw
    root = tmp_path_factory.mktemp("idx")
    big = resize_nearest(images, 28, 28)
    for stem, imgs in (("digits8", images), ("digits28", big)):
        save_idx_images(root / f"{stem}-train-images.idx", imgs[:TRAIN_COUNT])
        save_idx_labels(root / f"{stem}-train-labels.idx", labels[:TRAIN_COUNT])
        save_idx_images(root / f"{stem}-test-images.idx", imgs[TRAIN_COUNT:])
        save_idx_labels(root / f"{stem}-test-labels.idx", labels[TRAIN_COUNT:])
    return root


@pytest.fixture(scope="session")
def digits8_train(idx_dir):
    return load_dataset(idx_dir / "digits8-train-images.idx", idx_dir / "digits8-train-labels.idx")


@pytest.fixture(scope="session")
def digits8_test(idx_dir):
    return load_dataset(idx_dir / "digits8-test-images.idx", idx_dir / "digits8-test-labels.idx")


@pytest.fixture(scope="session")
def digits28_train(idx_dir):
    return load_dataset(idx_dir / "digits28-train-images.idx", idx_dir / "digits28-train-labels.idx")


@pytest.fixture(scope="session")
def digits28_test(idx_dir):
    return load_dataset(idx_dir / "digits28-test-images.idx", idx_dir / "digits28-test-labels.idx")


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

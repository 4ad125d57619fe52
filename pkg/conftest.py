"""
Shared fixtures for the FedAUXfdp tests
"""

import numpy as np
import pytest

from services.datamodel import Dataset
from services.event_logger import get_event_logger


@pytest.fixture(autouse=True)
def fresh_event_counts():
    """Every test starts with empty event counters"""
    get_event_logger().reset()
    yield
    get_event_logger().reset()


def make_blobs(seed: int, classes: int = 3, per_class: int = 40, dim: int = 4,
               spread: float = 0.5, separation: float = 3.0) -> Dataset:
    """Well separated Gaussian blobs, labels grouped by class"""
    rng = np.random.default_rng(seed)
    means = separation * rng.standard_normal((classes, dim))
    labels = np.repeat(np.arange(classes), per_class)
    features = means[labels] + spread * rng.standard_normal((labels.size, dim))
    return Dataset(features, labels, classes)


@pytest.fixture
def blobs() -> Dataset:
    return make_blobs(0)


def balanced_labels(classes: int, per_class: int) -> Dataset:
    """Label-only dataset (one dummy feature column) for partition tests"""
    labels = np.repeat(np.arange(classes), per_class)
    return Dataset(np.zeros((labels.size, 1)), labels, classes)

"""
Test Dirichlet Partitioning
Validates coverage, determinism and the heterogeneity statistics of client splits
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import balanced_labels
from services.datamodel import Dataset
from services.errors import PartitionError, RejectedInputError
from services.event_logger import get_event_logger
from services.partition import (
    Assignment,
    PartitionConfig,
    heterogeneity_stats,
    partition_dirichlet,
)


# Mean ranked class fractions at n=20 over a balanced 10-class source
HETEROGENEITY_TABLE = {
    0.01: [0.945, 0.052, 0.003],
    0.04: [0.753, 0.166, 0.056],
    0.16: [0.568, 0.223, 0.101],
    10.24: [0.151, 0.136, 0.120],
}
TABLE_TOLERANCE = 0.08
STAT_SEEDS = range(50)


def _single_client(labels, class_count):
    data = Dataset(np.zeros((len(labels), 1)), labels, class_count)
    everyone = np.arange(len(labels))
    return data, Assignment(clients=(everyone,), source_size=len(labels), seed_used=0, attempts=1)


def _mean_ranked(alpha, seeds, k=3, per_class=500):
    data = balanced_labels(10, per_class)
    means = [
        heterogeneity_stats(partition_dirichlet(data, PartitionConfig(20, alpha, seed)), data, k).mean
        for seed in seeds
    ]
    return np.mean(means, axis=0)


# ============================================
# partition_dirichlet
# ============================================

def test_single_client_receives_everything():
    data = balanced_labels(3, 7)
    assignment = partition_dirichlet(data, PartitionConfig(1, 0.01, 5))

    assert assignment.n_clients == 1
    np.testing.assert_array_equal(assignment.clients[0], np.arange(21))


def test_clients_are_disjoint_cover_and_nonempty():
    data = balanced_labels(10, 200)
    assignment = partition_dirichlet(data, PartitionConfig(20, 0.01, 11))

    merged = np.concatenate(assignment.clients)
    assert merged.size == len(data)
    np.testing.assert_array_equal(np.sort(merged), np.arange(len(data)))
    assert min(assignment.sizes()) > 0


@settings(max_examples=25, deadline=None)
@given(
    n_clients=st.integers(min_value=2, max_value=10),
    alpha=st.sampled_from([0.01, 0.1, 1.0, 10.24, 100.0]),
    seed=st.integers(min_value=0, max_value=2 ** 64 - 1),
)
def test_partition_property(n_clients, alpha, seed):
    data = balanced_labels(4, 50)
    assignment = partition_dirichlet(data, PartitionConfig(n_clients, alpha, seed))

    merged = np.concatenate(assignment.clients)
    np.testing.assert_array_equal(np.sort(merged), np.arange(len(data)))
    assert all(size > 0 for size in assignment.sizes())
    assert all(np.all(np.diff(idx) > 0) for idx in assignment.clients)


@pytest.mark.parametrize("alpha", [0.01, 0.16, 10.24])
def test_balanced_clients_have_equal_sizes(alpha):
    data = balanced_labels(10, 201)
    sizes = partition_dirichlet(data, PartitionConfig(20, alpha, 3)).sizes()

    assert sum(sizes) == len(data)
    assert sizes == [101] * 10 + [100] * 10


def test_unbalanced_split_follows_raw_class_draws():
    data = balanced_labels(10, 300)
    assignment = partition_dirichlet(data, PartitionConfig(4, 1e-6, 8, balance=False))

    merged = np.concatenate(assignment.clients)
    np.testing.assert_array_equal(np.sort(merged), np.arange(len(data)))
    # Each class lands whole on one client
    for idx in assignment.clients:
        counts = np.bincount(data.labels[idx], minlength=10)
        assert set(counts) <= {0, 300}


def test_partition_is_deterministic():
    data = balanced_labels(10, 100)
    config = PartitionConfig(20, 0.04, 2 ** 63 + 17)
    first = partition_dirichlet(data, config)
    second = partition_dirichlet(data, config)

    assert first.seed_used == second.seed_used
    for a, b in zip(first.clients, second.clients):
        np.testing.assert_array_equal(a, b)


def test_partition_rejects_bad_input():
    empty = Dataset(np.zeros((0, 1)), np.zeros(0, dtype=np.int64), 3)
    with pytest.raises(RejectedInputError):
        partition_dirichlet(empty, PartitionConfig(2, 1.0))
    with pytest.raises(RejectedInputError):
        PartitionConfig(20, 0.0)
    with pytest.raises(RejectedInputError):
        PartitionConfig(0, 1.0)
    with pytest.raises(RejectedInputError):
        PartitionConfig(2, 1.0, seed=2 ** 64)


def test_too_many_clients_exhausts_retries():
    data = balanced_labels(3, 1)

    with pytest.raises(PartitionError):
        partition_dirichlet(data, PartitionConfig(5, 1.0, seed=0, max_retries=3))
    assert get_event_logger().get_event_summary()['partition_retry'] == 4


# ============================================
# heterogeneity_stats
# ============================================

def test_ranked_fractions_direct_count():
    data, assignment = _single_client([1, 1, 1, 2], 3)
    report = heterogeneity_stats(assignment, data, 2)

    np.testing.assert_allclose(report.per_client[0], [0.75, 0.25])


def test_single_class_client_pads_with_zeros():
    data, assignment = _single_client([0, 0, 0], 3)
    report = heterogeneity_stats(assignment, data, 3)

    np.testing.assert_array_equal(report.per_client[0], [1.0, 0.0, 0.0])
    assert list(report.to_frame().columns) == ['rank_1', 'rank_2', 'rank_3']


def test_heterogeneity_rejects_bad_k():
    data, assignment = _single_client([0, 1], 2)
    with pytest.raises(RejectedInputError):
        heterogeneity_stats(assignment, data, 0)


def test_small_alpha_is_more_heterogeneous_per_seed():
    data = balanced_labels(10, 200)
    for seed in range(10):
        skewed = partition_dirichlet(data, PartitionConfig(20, 0.01, seed))
        mixed = partition_dirichlet(data, PartitionConfig(20, 10.24, seed))
        assert (
            heterogeneity_stats(skewed, data, 1).mean[0]
            > heterogeneity_stats(mixed, data, 1).mean[0]
        )


@pytest.mark.slow
def test_top_class_fraction_extremes():
    assert _mean_ranked(0.01, STAT_SEEDS, k=1)[0] >= 0.90
    assert 0.10 <= _mean_ranked(10.24, STAT_SEEDS, k=1)[0] <= 0.20


@pytest.mark.slow
@pytest.mark.parametrize("alpha", sorted(HETEROGENEITY_TABLE))
def test_ranked_fractions_match_table(alpha):
    observed = _mean_ranked(alpha, STAT_SEEDS)
    np.testing.assert_allclose(observed, HETEROGENEITY_TABLE[alpha], atol=TABLE_TOLERANCE)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))

"""
Dirichlet Partitioning for the FedAUXfdp simulator
Splits a labeled dataset among n clients and reports heterogeneity statistics

Algorithm (per attempt):
1. Give every client an equal capacity (N / n, remainders to the first clients)
2. For every class c draw q_c ~ Dirichlet(alpha * 1_n) over the clients, weight each
   client by its free fraction and apportion the class with largest remainders
3. Counts above a client's free room overflow into a fresh draw over the open clients
4. Re-draw with seed + attempt if any client ended up empty

With balance off, step 2 uses q_c alone and there are no capacities.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from services.datamodel import Dataset, frozen_array
from services.errors import PartitionError, RejectedInputError
from services.event_logger import log_partition_retry


MAX_SEED = 2 ** 64


@dataclass(frozen=True)
class PartitionConfig:
    """
    Dirichlet split settings

    Args:
        n_clients: number of clients n
        alpha: Dirichlet concentration (smaller = more heterogeneous)
        seed: 64-bit unsigned seed
        balance: fill equal client capacities class by class
        max_retries: re-draws allowed when a client comes out empty
    """

    n_clients: int
    alpha: float
    seed: int = 0
    balance: bool = True
    max_retries: int = 100

    def __post_init__(self):
        if self.n_clients < 1:
            raise RejectedInputError(f"n_clients must be >= 1, got {self.n_clients}")
        if not (self.alpha > 0) or not np.isfinite(self.alpha):
            raise RejectedInputError(f"alpha must be a positive real, got {self.alpha}")
        if not 0 <= self.seed < MAX_SEED:
            raise RejectedInputError(f"seed must be a 64-bit unsigned integer, got {self.seed}")


@dataclass(frozen=True, eq=False)
class Assignment:
    """Per-client sorted example indices into the source dataset"""

    clients: Tuple[np.ndarray, ...]
    source_size: int
    seed_used: int
    attempts: int

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    def sizes(self) -> List[int]:
        return [int(idx.size) for idx in self.clients]

    def client_dataset(self, dataset: Dataset, client_id: int) -> Dataset:
        return dataset.subset(self.clients[client_id])

    def client_datasets(self, dataset: Dataset) -> List[Dataset]:
        return [dataset.subset(idx) for idx in self.clients]


@dataclass(frozen=True, eq=False)
class HeterogeneityReport:
    """
    Ranked top-k class fractions

    Attributes:
        per_client: n_clients x k matrix, row i = client i's class fractions sorted descending
        mean: cross-client mean of each rank
    """

    per_client: np.ndarray
    mean: np.ndarray
    k: int

    def to_frame(self) -> pd.DataFrame:
        columns = [f'rank_{r + 1}' for r in range(self.k)]
        frame = pd.DataFrame(self.per_client, columns=columns)
        frame.index.name = 'client'
        return frame


def _log_dirichlet_rows(rng: np.random.Generator, alpha: float, rows: int, cols: int) -> np.ndarray:
    """
    Log of `rows` independent Dirichlet(alpha * 1_cols) draws

    Gamma(alpha) = Gamma(alpha + 1) * U^(1/alpha) keeps small-alpha draws away from
    underflow: the log is finite even when the share itself is below 1e-308.
    """
    log_gamma = np.log(rng.standard_gamma(alpha + 1.0, size=(rows, cols)))
    log_gamma += np.log1p(-rng.random(size=(rows, cols))) / alpha
    return log_gamma - logsumexp(log_gamma, axis=1, keepdims=True)


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing exactly to `total`; ties go to the lower client index"""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    shortfall = int(total - counts.sum())
    if shortfall > 0:
        order = np.argsort(-(raw - counts), kind='stable')
        counts[order[:shortfall]] += 1
    return counts


def _client_capacities(total: int, n_clients: int) -> np.ndarray:
    """Equal client sizes; the first total % n_clients clients hold one extra example"""
    return _largest_remainder(np.full(n_clients, 1.0 / n_clients), total)


def _fill_class(
    rng: np.random.Generator,
    size: int,
    alpha: float,
    remaining: np.ndarray,
    capacity: np.ndarray
) -> np.ndarray:
    """
    Client counts for one class under the remaining capacities (updated in place)

    Each round draws fresh Dirichlet shares over all clients, closes the full ones,
    weights the open ones by their free fraction and apportions what is left of the
    class; counts above a client's free room overflow into the next round.
    """
    counts = np.zeros(remaining.size, dtype=np.int64)
    left = size
    while left > 0:
        open_ = remaining > 0
        log_w = np.full(remaining.size, -np.inf)
        draw = _log_dirichlet_rows(rng, alpha, 1, remaining.size)[0]
        log_w[open_] = draw[open_] + np.log(remaining[open_] / capacity[open_])

        give = np.minimum(_largest_remainder(np.exp(log_w - logsumexp(log_w)), left), remaining)
        if give.sum() == 0:
            fullest = int(np.argmax(remaining))
            give[fullest] = min(left, remaining[fullest])
        counts += give
        remaining -= give
        left -= int(give.sum())
    return counts


def _draw_assignment(
    labels: np.ndarray,
    class_count: int,
    config: PartitionConfig,
    seed: int
) -> List[np.ndarray]:
    rng = np.random.default_rng(seed)
    n = config.n_clients
    capacity = _client_capacities(labels.size, n)
    remaining = capacity.copy()

    buckets: List[List[np.ndarray]] = [[] for _ in range(n)]
    for c in range(class_count):
        class_idx = np.flatnonzero(labels == c)
        if class_idx.size == 0:
            continue
        class_idx = rng.permutation(class_idx)
        if config.balance:
            counts = _fill_class(rng, class_idx.size, config.alpha, remaining, capacity)
        else:
            log_q = _log_dirichlet_rows(rng, config.alpha, 1, n)[0]
            counts = _largest_remainder(np.exp(log_q), class_idx.size)
        for client_id, chunk in enumerate(np.split(class_idx, np.cumsum(counts)[:-1])):
            if chunk.size:
                buckets[client_id].append(chunk)

    return [
        np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)
        for parts in buckets
    ]


def partition_dirichlet(dataset: Dataset, config: PartitionConfig) -> Assignment:
    """
    Split a dataset among clients with one Dirichlet draw per class

    Args:
        dataset: Source dataset (nonempty)
        config: Partition settings

    Returns:
        Assignment whose index lists are disjoint, cover the dataset and are nonempty

    Raises:
        RejectedInputError: empty dataset
        PartitionError: every attempt within the retry budget left a client empty
    """
    if len(dataset) == 0:
        raise RejectedInputError("cannot partition an empty dataset")

    if config.n_clients == 1:
        everything = frozen_array(np.arange(len(dataset)), dtype=np.int64)
        return Assignment(clients=(everything,), source_size=len(dataset), seed_used=config.seed, attempts=1)

    for attempt in range(config.max_retries + 1):
        seed = (config.seed + attempt) % MAX_SEED
        clients = _draw_assignment(dataset.labels, dataset.class_count, config, seed)
        empty = [i for i, idx in enumerate(clients) if idx.size == 0]
        if not empty:
            return Assignment(
                clients=tuple(frozen_array(idx, dtype=np.int64) for idx in clients),
                source_size=len(dataset),
                seed_used=seed,
                attempts=attempt + 1,
            )
        log_partition_retry(config.seed, attempt + 1, empty)

    raise PartitionError(
        f"{config.max_retries} re-draws still left clients empty "
        f"(n_clients={config.n_clients}, alpha={config.alpha}, {len(dataset)} examples)"
    )


def heterogeneity_stats(assignment: Assignment, dataset: Dataset, k: int) -> HeterogeneityReport:
    """
    Ranked top-k class fractions per client and their cross-client means

    Args:
        assignment: Client index lists over `dataset`
        dataset: The partitioned dataset
        k: Number of ranks to keep (padded with zeros past the class count)

    Returns:
        HeterogeneityReport
    """
    if k < 1:
        raise RejectedInputError(f"k must be >= 1, got {k}")
    if assignment.source_size != len(dataset):
        raise RejectedInputError(
            f"assignment was made for {assignment.source_size} examples, dataset has {len(dataset)}"
        )

    ranked = np.zeros((assignment.n_clients, k))
    for i, idx in enumerate(assignment.clients):
        if idx.size == 0:
            continue
        counts = np.bincount(dataset.labels[idx], minlength=dataset.class_count)
        fractions = np.sort(counts / idx.size)[::-1][:k]
        ranked[i, :fractions.size] = fractions

    return HeterogeneityReport(per_client=ranked, mean=ranked.mean(axis=0), k=k)


__all__ = [
    'PartitionConfig',
    'Assignment',
    'HeterogeneityReport',
    'partition_dirichlet',
    'heterogeneity_stats',
]

"""
Core domain types for the FedAUXfdp simulator

Every array-valued type stores a read-only float64 (or int64) copy, so instances can be
shared between concurrently training clients without copying.

Labels are zero-based everywhere in this package; one-based files are converted when
they are read (see services/experiment.py).
"""

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from services.errors import RejectedInputError


SOFT_LABEL_ROW_TOLERANCE = 1e-9


def frozen_array(values, dtype=np.float64) -> np.ndarray:
    """Copy `values` into a read-only array"""
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Extracted features h(x) with the bias coordinate first"""

    values: np.ndarray

    def __post_init__(self):
        arr = frozen_array(self.values)
        if arr.ndim != 1:
            raise RejectedInputError(f"feature vector must be 1-D, got shape {arr.shape}")
        if arr.size < 2:
            raise RejectedInputError("feature vector needs at least one feature plus the bias coordinate")
        object.__setattr__(self, 'values', arr)

    @property
    def dimension(self) -> int:
        return int(self.values.size)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass(frozen=True, eq=False)
class LabeledExample:
    features: FeatureVector
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Labeled examples stored column-wise

    Attributes:
        features: N x d matrix, one row per example
        labels: N zero-based class indices
        class_count: C, the global number of classes
    """

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        features = frozen_array(self.features)
        labels = frozen_array(self.labels, dtype=np.int64)

        if features.ndim != 2:
            raise RejectedInputError(f"dataset features must be 2-D, got shape {features.shape}")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise RejectedInputError(
                f"labels shape {labels.shape} does not match {features.shape[0]} feature rows"
            )
        if self.class_count < 1:
            raise RejectedInputError(f"class_count must be positive, got {self.class_count}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise RejectedInputError(
                f"labels must lie in [0, {self.class_count}), got range "
                f"[{labels.min()}, {labels.max()}]"
            )

        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'labels', labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __iter__(self) -> Iterator[LabeledExample]:
        return iter(self.examples)

    @property
    def examples(self) -> Tuple[LabeledExample, ...]:
        return tuple(
            LabeledExample(FeatureVector(row), int(label))
            for row, label in zip(self.features, self.labels)
        )

    @property
    def dimension(self) -> int:
        return int(self.features.shape[1])

    def require_nonempty(self, what: str = "dataset") -> 'Dataset':
        if len(self) == 0:
            raise RejectedInputError(f"{what} is empty")
        return self

    def subset(self, indices: Sequence[int]) -> 'Dataset':
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count)

    def with_features(self, features: np.ndarray) -> 'Dataset':
        """Same labels, transformed features (extraction, bias, normalization)"""
        return Dataset(features, self.labels, self.class_count)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def observed_classes(self) -> int:
        return int(np.count_nonzero(self.class_histogram()))


@dataclass(frozen=True, eq=False)
class AuxiliarySplit:
    """
    Public unlabeled pool split into D- (negatives) and D_distill

    Index arrays refer to rows of the auxiliary pool the split was made from.
    """

    negatives: np.ndarray
    distill: np.ndarray
    split_fraction: float
    negative_indices: np.ndarray
    distill_indices: np.ndarray

    def __post_init__(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise RejectedInputError(f"split_fraction must lie in (0, 1), got {self.split_fraction}")
        negatives = frozen_array(self.negatives)
        distill = frozen_array(self.distill)
        negative_indices = frozen_array(self.negative_indices, dtype=np.int64)
        distill_indices = frozen_array(self.distill_indices, dtype=np.int64)
        if np.intersect1d(negative_indices, distill_indices).size:
            raise RejectedInputError("negatives and distill must be disjoint index sets")
        if negatives.shape[0] != negative_indices.size or distill.shape[0] != distill_indices.size:
            raise RejectedInputError("auxiliary split rows do not match their index sets")
        object.__setattr__(self, 'negatives', negatives)
        object.__setattr__(self, 'distill', distill)
        object.__setattr__(self, 'negative_indices', negative_indices)
        object.__setattr__(self, 'distill_indices', distill_indices)

    @classmethod
    def from_pool(
        cls,
        pool: np.ndarray,
        split_fraction: float,
        rng: np.random.Generator
    ) -> 'AuxiliarySplit':
        """
        Shuffle the pool and cut it: the first `split_fraction` share becomes D_distill,
        the rest D-.
        """
        pool = np.asarray(pool, dtype=np.float64)
        if pool.ndim != 2 or pool.shape[0] < 2:
            raise RejectedInputError("auxiliary pool needs at least two rows")
        if not 0.0 < split_fraction < 1.0:
            raise RejectedInputError(f"split_fraction must lie in (0, 1), got {split_fraction}")

        order = rng.permutation(pool.shape[0])
        n_distill = int(round(split_fraction * pool.shape[0]))
        n_distill = min(max(n_distill, 1), pool.shape[0] - 1)
        distill_idx = np.sort(order[:n_distill])
        negative_idx = np.sort(order[n_distill:])
        return cls(
            negatives=pool[negative_idx],
            distill=pool[distill_idx],
            split_fraction=split_fraction,
            negative_indices=negative_idx,
            distill_indices=distill_idx,
        )


@dataclass(frozen=True, eq=False)
class HeadParams:
    """
    Trainable parameter block beta

    Row k is beta_k with the bias beta_{k,0} in column 0. A binary head keeps a single row.
    """

    matrix: np.ndarray

    def __post_init__(self):
        arr = frozen_array(self.matrix)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 2:
            raise RejectedInputError(f"head matrix must be rows x (p+1) with p >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise RejectedInputError("head parameters must be finite")
        object.__setattr__(self, 'matrix', arr)

    @classmethod
    def zeros(cls, class_count: int, dimension: int, binary: bool = False) -> 'HeadParams':
        rows = 1 if binary else class_count
        return cls(np.zeros((rows, dimension)))

    @property
    def rows(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def dimension(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def is_binary(self) -> bool:
        return self.rows == 1

    @property
    def class_count(self) -> int:
        return 2 if self.is_binary else self.rows

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.matrix))


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float = 0.5
    delta: float = 1e-5
    enabled: bool = True

    def __post_init__(self):
        if not self.enabled:
            return
        if not (self.epsilon > 0):
            raise RejectedInputError(f"epsilon must be positive, got {self.epsilon}")
        if not (0.0 < self.delta < 1.0):
            raise RejectedInputError(f"delta must lie in (0, 1), got {self.delta}")

    @classmethod
    def disabled(cls) -> 'PrivacyParams':
        return cls(epsilon=0.0, delta=0.0, enabled=False)


@dataclass(frozen=True, eq=False)
class SoftLabelMatrix:
    """|D_distill| x C server supervision, one probability vector per row"""

    rows: np.ndarray

    def __post_init__(self):
        arr = frozen_array(self.rows)
        if arr.ndim != 2:
            raise RejectedInputError(f"soft labels must be 2-D, got shape {arr.shape}")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise RejectedInputError("soft labels must be finite and non-negative")
        sums = arr.sum(axis=1)
        if arr.shape[0] and np.max(np.abs(sums - 1.0)) > SOFT_LABEL_ROW_TOLERANCE:
            raise RejectedInputError(
                f"soft-label rows must sum to 1, worst row sums to {sums[np.argmax(np.abs(sums - 1.0))]!r}"
            )
        object.__setattr__(self, 'rows', arr)

    @property
    def class_count(self) -> int:
        return int(self.rows.shape[1])

    def __len__(self) -> int:
        return int(self.rows.shape[0])


@dataclass(frozen=True, eq=False)
class CertaintyScores:
    """Per-distillation-point output f_i(x) of one client's scoring model"""

    values: np.ndarray

    def __post_init__(self):
        arr = frozen_array(self.values)
        if arr.ndim != 1:
            raise RejectedInputError(f"certainty scores must be 1-D, got shape {arr.shape}")
        if np.any(arr <= 0.0) or np.any(arr >= 1.0):
            raise RejectedInputError("certainty scores must lie strictly inside (0, 1)")
        object.__setattr__(self, 'values', arr)

    def __len__(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class MetricsRecord:
    """One CSV row: a (method, alpha, eps, lambda, seed) cell and its outcome"""

    method: str
    alpha: float
    eps_class: Optional[float]
    lambda_class: float
    seed: int
    accuracy: float
    eps_total: float
    delta_total: float
    fallback_count: int = 0
    wall_ms: int = 0

    CSV_COLUMNS = (
        'method', 'alpha', 'eps_class', 'lambda', 'seed', 'accuracy',
        'eps_total', 'delta_total', 'fallback_count', 'wall_ms',
    )

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise RejectedInputError(f"accuracy must lie in [0, 1], got {self.accuracy}")

    def to_row(self) -> dict:
        return {
            'method': self.method,
            'alpha': self.alpha,
            'eps_class': 'none' if self.eps_class is None else self.eps_class,
            'lambda': self.lambda_class,
            'seed': self.seed,
            'accuracy': self.accuracy,
            'eps_total': self.eps_total,
            'delta_total': self.delta_total,
            'fallback_count': self.fallback_count,
            'wall_ms': self.wall_ms,
        }


__all__ = [
    'FeatureVector',
    'LabeledExample',
    'Dataset',
    'AuxiliarySplit',
    'HeadParams',
    'PrivacyParams',
    'SoftLabelMatrix',
    'CertaintyScores',
    'MetricsRecord',
    'frozen_array',
]

"""
Frozen Feature Extraction for the FedAUXfdp simulator
Stands in for the pretrained extractor h0 and prepares regression inputs

Pipeline for every regression:
1. extract (identity / seeded random projection / precomputed FVEC1 rows)
2. append_bias (constant 1.0 first)
3. fit_normalizer on the regression's reference set (max Euclidean norm)
4. normalize, so every training row has norm <= 1
Inputs the constant was not fitted on (distillation, test) are also clipped to the unit ball.
"""

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from services.datamodel import FeatureVector, frozen_array
from services.errors import NormalizationError, RejectedInputError
from services.fileio import read_fvec


DEFAULT_PROJECTION_DIM = 64


class ExtractorKind(str, Enum):
    IDENTITY = 'identity'
    RANDOM_PROJECTION = 'random_projection'
    FILE_BACKED = 'file_backed'


class NormalizationPolicy(str, Enum):
    """Which data the max-norm constant is fitted on"""
    LOCAL = 'local'     # the regression's own training set
    PUBLIC = 'public'   # the public auxiliary pool; private rows are clipped


class FeatureExtractor:
    """
    Frozen extractor h0

    Build one with the classmethods; the projection matrix (or the stored rows) is
    read-only, so repeated extraction of the same input is bit-identical.

    Example:
        extractor = FeatureExtractor.random_projection(input_dim=32, output_dim=64, seed=7)
        h = extractor.extract(raw_vector)
    """

    def __init__(
        self,
        kind: ExtractorKind,
        input_dim: Optional[int] = None,
        output_dim: Optional[int] = None,
        matrix: Optional[np.ndarray] = None,
        rows: Optional[np.ndarray] = None,
        path: Optional[str] = None
    ):
        self._kind = ExtractorKind(kind)
        self._input_dim = input_dim
        self._output_dim = output_dim
        self._matrix = matrix
        self._rows = rows
        self._path = path

    @classmethod
    def identity(cls, input_dim: Optional[int] = None) -> 'FeatureExtractor':
        return cls(ExtractorKind.IDENTITY, input_dim=input_dim, output_dim=input_dim)

    @classmethod
    def random_projection(
        cls,
        input_dim: int,
        output_dim: int = DEFAULT_PROJECTION_DIM,
        seed: int = 0
    ) -> 'FeatureExtractor':
        if input_dim < 1 or output_dim < 1:
            raise RejectedInputError(
                f"projection dimensions must be positive, got {input_dim} -> {output_dim}"
            )
        rng = np.random.default_rng(seed)
        matrix = rng.standard_normal((input_dim, output_dim)) / np.sqrt(output_dim)
        return cls(
            ExtractorKind.RANDOM_PROJECTION,
            input_dim=input_dim,
            output_dim=output_dim,
            matrix=frozen_array(matrix),
        )

    @classmethod
    def file_backed(cls, path: Union[str, Path]) -> 'FeatureExtractor':
        rows = frozen_array(read_fvec(path))
        return cls(
            ExtractorKind.FILE_BACKED,
            output_dim=int(rows.shape[1]),
            rows=rows,
            path=str(path),
        )

    @property
    def kind(self) -> ExtractorKind:
        return self._kind

    @property
    def output_dim(self) -> Optional[int]:
        return self._output_dim

    @property
    def row_count(self) -> int:
        """Rows available to a file-backed extractor"""
        return 0 if self._rows is None else int(self._rows.shape[0])

    def extract(self, raw) -> np.ndarray:
        """
        Map one raw input to its feature vector

        Args:
            raw: Raw real vector, or the row index for a file-backed extractor

        Returns:
            1-D float64 feature vector (no bias coordinate yet)
        """
        if self._kind == ExtractorKind.FILE_BACKED:
            return self._lookup(np.atleast_1d(np.asarray(raw)))[0]

        vector = np.asarray(raw, dtype=np.float64)
        if vector.ndim != 1:
            raise RejectedInputError(f"raw input must be 1-D, got shape {vector.shape}")
        return self.extract_batch(vector[None, :])[0]

    def extract_batch(self, raw: np.ndarray) -> np.ndarray:
        """Row-wise extract over a matrix (or a vector of row indices for file-backed)"""
        if self._kind == ExtractorKind.FILE_BACKED:
            return self._lookup(np.asarray(raw))

        matrix = np.asarray(raw, dtype=np.float64)
        if matrix.ndim != 2:
            raise RejectedInputError(f"raw batch must be 2-D, got shape {matrix.shape}")
        if self._input_dim is not None and matrix.shape[1] != self._input_dim:
            raise RejectedInputError(
                f"extractor expects {self._input_dim}-dimensional inputs, got {matrix.shape[1]}"
            )
        if self._kind == ExtractorKind.IDENTITY:
            return matrix.copy()
        return matrix @ self._matrix

    def _lookup(self, indices: np.ndarray) -> np.ndarray:
        idx = indices.ravel()
        if idx.size and not np.all(np.mod(idx, 1) == 0):
            raise RejectedInputError("file-backed extractor takes integer row indices")
        idx = idx.astype(np.int64)
        missing = idx[(idx < 0) | (idx >= self.row_count)]
        if missing.size:
            raise RejectedInputError(
                f"{self._path} has {self.row_count} rows, no row {int(missing[0])}"
            )
        return self._rows[idx].copy()


@dataclass(frozen=True)
class NormalizationConstant:
    """Max Euclidean norm over a reference set"""

    value: float

    def __post_init__(self):
        if not (self.value > 0) or not np.isfinite(self.value):
            raise RejectedInputError(f"normalization constant must be positive, got {self.value}")


# ============================================================================
# OPERATIONS
# ============================================================================

def extract(extractor: FeatureExtractor, raw) -> np.ndarray:
    return extractor.extract(raw)


def append_bias(features: np.ndarray) -> np.ndarray:
    """
    Prepend the constant bias coordinate

    Works on a single vector ([2.0] -> [1.0, 2.0]) or row-wise on a matrix.
    """
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim == 1:
        return np.concatenate(([1.0], arr))
    if arr.ndim == 2:
        return np.hstack((np.ones((arr.shape[0], 1)), arr))
    raise RejectedInputError(f"features must be 1-D or 2-D, got shape {arr.shape}")


def fit_normalizer(reference) -> NormalizationConstant:
    """
    Fit the max-norm constant

    Args:
        reference: Matrix (one vector per row) or list of vectors

    Raises:
        RejectedInputError: empty reference
        NormalizationError: every reference vector is zero
    """
    rows = [np.asarray(v, dtype=np.float64).ravel() for v in reference]
    if not rows:
        raise RejectedInputError("normalizer reference set is empty")

    value = max(float(np.linalg.norm(v)) for v in rows)
    if value == 0.0:
        raise NormalizationError("every reference vector is zero, no normalization constant exists")
    return NormalizationConstant(value)


def normalize(features, c: NormalizationConstant) -> FeatureVector:
    return FeatureVector(np.asarray(features, dtype=np.float64) / c.value)


def normalize_rows(features: np.ndarray, c: NormalizationConstant) -> np.ndarray:
    return np.asarray(features, dtype=np.float64) / c.value


def clip_to_unit_ball(features: np.ndarray) -> np.ndarray:
    """Scale rows with norm above 1 back onto the unit sphere"""
    arr = np.atleast_2d(np.asarray(features, dtype=np.float64))
    norms = np.linalg.norm(arr, axis=1)
    scale = np.where(norms > 1.0, 1.0 / np.maximum(norms, 1.0), 1.0)
    clipped = arr * scale[:, None]
    return clipped if np.ndim(features) == 2 else clipped[0]


def prepare_training_features(
    features: np.ndarray,
    policy: NormalizationPolicy = NormalizationPolicy.LOCAL,
    public_reference: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, NormalizationConstant]:
    """
    Bias-augment and normalize the training rows of one regression

    Args:
        features: Extracted training rows (no bias yet)
        policy: LOCAL fits on these rows; PUBLIC fits on public_reference
        public_reference: Extracted public rows (required for PUBLIC)

    Returns:
        (normalized rows with norm <= 1, fitted constant)
    """
    augmented = append_bias(features)
    if NormalizationPolicy(policy) == NormalizationPolicy.LOCAL:
        constant = fit_normalizer(augmented)
        return normalize_rows(augmented, constant), constant

    if public_reference is None:
        raise RejectedInputError("public normalization needs a public reference set")
    constant = fit_normalizer(append_bias(public_reference))
    return clip_to_unit_ball(normalize_rows(augmented, constant)), constant


def prepare_inference_features(features: np.ndarray, constant: NormalizationConstant) -> np.ndarray:
    """Bias-augment, normalize with a fitted constant, then clip to the unit ball"""
    return clip_to_unit_ball(normalize_rows(append_bias(features), constant))


__all__ = [
    'DEFAULT_PROJECTION_DIM',
    'ExtractorKind',
    'NormalizationPolicy',
    'FeatureExtractor',
    'NormalizationConstant',
    'extract',
    'append_bias',
    'fit_normalizer',
    'normalize',
    'normalize_rows',
    'clip_to_unit_ball',
    'prepare_training_features',
    'prepare_inference_features',
]

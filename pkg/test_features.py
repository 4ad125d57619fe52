"""
Test Feature Extraction and Normalization
Validates the frozen extractors and the max-norm pipeline feeding every regression
"""

import numpy as np
import pytest

from services.errors import NormalizationError, RejectedInputError
from services.features import (
    FeatureExtractor,
    NormalizationConstant,
    NormalizationPolicy,
    append_bias,
    clip_to_unit_ball,
    extract,
    fit_normalizer,
    normalize,
    prepare_inference_features,
    prepare_training_features,
)
from services.fileio import write_fvec


STORED_ROWS = np.array([[0.5, 1.25], [2.0, -3.5], [0.125, 7.0]], dtype=np.float32)


# ============================================
# Extractors
# ============================================

def test_identity_extractor():
    np.testing.assert_array_equal(extract(FeatureExtractor.identity(), [0.3, -1.2]), [0.3, -1.2])


def test_random_projection_is_frozen():
    raw = np.random.default_rng(1).standard_normal(8)
    first = FeatureExtractor.random_projection(8, 16, seed=42)
    second = FeatureExtractor.random_projection(8, 16, seed=42)

    out = first.extract(raw)
    assert out.shape == (16,)
    np.testing.assert_array_equal(out, first.extract(raw))
    np.testing.assert_array_equal(out, second.extract(raw))
    assert not np.array_equal(out, FeatureExtractor.random_projection(8, 16, seed=43).extract(raw))


def test_extractor_rejects_wrong_input_dimension():
    with pytest.raises(RejectedInputError):
        FeatureExtractor.random_projection(8, 16).extract(np.zeros(5))


def test_file_backed_lookup_is_bit_exact(tmp_path):
    path = tmp_path / "features.fvec"
    write_fvec(path, STORED_ROWS)
    extractor = FeatureExtractor.file_backed(path)

    assert extractor.row_count == 3
    np.testing.assert_array_equal(extractor.extract(2), STORED_ROWS[2].astype(np.float64))
    np.testing.assert_array_equal(extractor.extract_batch([0, 2]), STORED_ROWS[[0, 2]].astype(np.float64))
    with pytest.raises(RejectedInputError):
        extractor.extract(3)


# ============================================
# Bias and normalization
# ============================================

def test_append_bias():
    np.testing.assert_array_equal(append_bias([2.0]), [1.0, 2.0])
    np.testing.assert_array_equal(append_bias([]), [1.0])
    np.testing.assert_array_equal(append_bias([0, 0, 0]), [1, 0, 0, 0])
    np.testing.assert_array_equal(append_bias([[2.0], [3.0]]), [[1.0, 2.0], [1.0, 3.0]])


def test_fit_normalizer_examples():
    assert fit_normalizer([(1, 0), (3, 4)]).value == 5.0
    assert fit_normalizer([(1, 0)]).value == 1.0


def test_fit_normalizer_matches_max_norm():
    vectors = np.random.default_rng(7).standard_normal((100, 6))
    expected = max(np.sqrt(sum(float(v) ** 2 for v in row)) for row in vectors)

    assert fit_normalizer(vectors).value == pytest.approx(expected, rel=1e-14)


def test_fit_normalizer_failures():
    with pytest.raises(NormalizationError):
        fit_normalizer(np.zeros((4, 3)))
    with pytest.raises(RejectedInputError):
        fit_normalizer([])
    with pytest.raises(RejectedInputError):
        NormalizationConstant(0.0)


def test_normalize_examples():
    c = NormalizationConstant(5.0)
    unit = normalize((3, 4), c)

    np.testing.assert_allclose(unit.values, [0.6, 0.8], rtol=0, atol=1e-16)
    assert unit.norm == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(normalize((1, 0), c).values, [0.2, 0.0], rtol=0, atol=1e-16)
    np.testing.assert_array_equal(normalize((0, 0), c).values, [0.0, 0.0])


def test_clip_to_unit_ball():
    clipped = clip_to_unit_ball(np.array([[3.0, 4.0], [0.3, 0.4]]))

    np.testing.assert_allclose(clipped, [[0.6, 0.8], [0.3, 0.4]])
    np.testing.assert_array_equal(clip_to_unit_ball(np.array([0.1, 0.2])), [0.1, 0.2])


# ============================================
# Regression inputs
# ============================================

def test_local_training_features_touch_the_unit_sphere():
    raw = np.random.default_rng(2).standard_normal((50, 4)) * 3.0
    rows, constant = prepare_training_features(raw)
    norms = np.linalg.norm(rows, axis=1)

    assert rows.shape == (50, 5)
    assert np.all(norms <= 1.0 + 1e-12)
    assert norms.max() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(rows[:, 0], 1.0 / constant.value)


def test_public_policy_clips_private_rows():
    rng = np.random.default_rng(3)
    public = rng.standard_normal((20, 3))
    private = 10.0 * rng.standard_normal((30, 3))
    rows, constant = prepare_training_features(private, NormalizationPolicy.PUBLIC, public)

    assert constant.value == pytest.approx(fit_normalizer(append_bias(public)).value)
    assert np.all(np.linalg.norm(rows, axis=1) <= 1.0 + 1e-12)
    with pytest.raises(RejectedInputError):
        prepare_training_features(private, NormalizationPolicy.PUBLIC)


def test_inference_features_reuse_training_constant():
    rows = prepare_inference_features(np.array([[4.0, 0.0], [0.0, 0.0]]), NormalizationConstant(2.0))

    np.testing.assert_allclose(rows[1], [0.5, 0.0, 0.0])
    assert np.linalg.norm(rows[0]) == pytest.approx(1.0)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))

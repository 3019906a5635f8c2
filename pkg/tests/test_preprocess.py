import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tracernet.errors import ConfigError
from tracernet.phantom import generate_cohort
from tracernet.preprocess import (
    ReferenceNormalizer,
    SliceMinMaxScaler,
    assemble_sample,
    build_datasets,
    channel_names,
    minmax_slice,
    normalize_reference,
    split_indices,
)


def test_reference_division_constant():
    img = np.full((4, 4), 4.0)
    mask = np.zeros((4, 4), bool)
    mask[:2, :2] = True
    np.testing.assert_array_equal(normalize_reference(img, mask), np.ones((4, 4)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 5), elements=st.floats(0.1, 10.0)))
def test_reference_mean_becomes_one(img):
    mask = np.zeros((5, 5), bool)
    mask[1:3, 2:4] = True
    assert normalize_reference(img, mask)[mask].mean() == pytest.approx(1.0, rel=1e-12)


def test_reference_zero_mean_rejected():
    mask = np.ones((3, 3), bool)
    with pytest.raises(ValueError):
        normalize_reference(np.zeros((3, 3)), mask)
    with pytest.raises(ValueError):
        normalize_reference(np.ones((3, 3)), np.zeros((3, 3), bool))


def test_minmax_two_values():
    np.testing.assert_array_equal(minmax_slice(np.array([[2.0, 4.0]])), [[0.0, 1.0]])


def test_minmax_constant_slice_is_zero():
    np.testing.assert_array_equal(minmax_slice(np.full((3, 3), 7.0)), np.zeros((3, 3)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)))
def test_minmax_range(img):
    out = minmax_slice(img)
    if np.ptp(img) > 0:
        assert out.min() == 0.0 and out.max() == 1.0
    else:
        assert np.all(out == 0.0)


@pytest.fixture(scope="module")
def small_cohort():
    return generate_cohort(6, 3)


def test_channel_counts(small_cohort):
    s = small_cohort.series[0]
    assert assemble_sample(s, [0.0]).input.shape == (2, 64, 64)
    sample = assemble_sample(s, [8.0, 1.5, 6.0, 4.0])
    assert sample.input.shape == (8, 64, 64) and sample.target.shape == (2, 64, 64)
    assert sample.input_times == (1.5, 4.0, 6.0, 8.0)
    assert sample.input.min() >= 0.0 and sample.input.max() <= 1.0
    assert sample.target.min() >= 0.0 and sample.target.max() <= 1.0


def test_missing_time_point(small_cohort):
    with pytest.raises(KeyError):
        assemble_sample(small_cohort.series[0], [2.0])


def test_channel_names():
    assert channel_names([4.0, 1.5]) == ["sagittal_0015", "axial_0015", "sagittal_0040", "axial_0040"]


def test_split_sizes_and_disjointness():
    tr, te = split_indices(136, 105 / 136, 0)
    assert (len(tr), len(te)) == (105, 31)
    assert not set(tr) & set(te) and set(tr) | set(te) == set(range(136))
    tr2, te2 = split_indices(136, 105 / 136, 0)
    assert np.array_equal(tr, tr2) and np.array_equal(te, te2)


def test_degenerate_split_rejected():
    with pytest.raises(ConfigError):
        split_indices(3, 0.1, 0)


def test_datasets_disjoint(small_cohort):
    train, test = build_datasets(small_cohort, [1.5], 0.5, 0)
    assert not set(train.subject_ids) & set(test.subject_ids)
    X, y = train.arrays()
    assert X.shape == (3, 2, 64, 64) and y.dtype == np.float32


def test_transformers_match_functions(rng):
    X = rng.random((2, 2, 5, 5)) + 0.5
    masks = np.zeros((2, 5, 5), bool)
    masks[:, 0, :] = True
    norm = ReferenceNormalizer(masks).fit_transform(X)
    assert np.allclose(norm[:, :, 0, :].mean(axis=-1), 1.0)
    scaled = SliceMinMaxScaler().fit_transform(norm)
    np.testing.assert_array_equal(scaled[1, 0], minmax_slice(norm[1, 0]))
    assert ReferenceNormalizer(masks).get_params() == {"reference_masks": masks}

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from specklemotion.errors import DimensionMismatch, PatchOutOfBounds
from specklemotion.features import (ValidDomain, consecutive_distances, extract_features, feature_distance,
                                    pairwise_distance_matrix)
from specklemotion.imageio import FrameSequence


def test_patch_size_gives_k(small_seq):
    fs = extract_features(small_seq, (7, 8), 11)
    assert fs.vectors.shape == (6, 121)


def test_row_major_order(small_seq):
    fs = extract_features(small_seq, (6, 9), 3)
    np.testing.assert_array_equal(fs.vectors[2], small_seq.frames[2, 8:11, 5:8].ravel())


def test_constant_frames():
    seq = FrameSequence(np.full((3, 20, 20), 0.25), 1.0)
    assert np.all(extract_features(seq, (10, 10), 11).vectors == 0.25)


def test_out_of_bounds():
    seq = FrameSequence(np.zeros((2, 512, 512)), 1.0)
    with pytest.raises(PatchOutOfBounds):
        extract_features(seq, (2, 2), 11)
    with pytest.raises(PatchOutOfBounds):
        extract_features(seq, (507, 100), 11)
    extract_features(seq, (506, 506), 11)


def test_valid_domain():
    d = ValidDomain.for_shape((20, 30), 11)
    assert (d.x0, d.y0, d.x1, d.y1) == (5, 5, 25, 15)
    assert d.contains(5, 5) and not d.contains(25, 5) and not d.contains(4, 10)
    assert d.mask((20, 30)).sum() == d.width * d.height == len(d.pixels())


def test_distance_examples(rng):
    a = np.zeros(121)
    b = np.zeros(121)
    b[3], b[50] = 3.0, 4.0
    assert feature_distance(a, b) == 5.0
    assert feature_distance(b, b) == 0.0
    x, y = rng.normal(size=(2, 121))
    direct = sum((xi - yi) ** 2 for xi, yi in zip(x, y)) ** 0.5
    assert feature_distance(x, y) == pytest.approx(direct, rel=1e-12)
    with pytest.raises(DimensionMismatch):
        feature_distance(np.zeros(3), np.zeros(4))


def test_pairwise_identical_rows():
    assert np.all(pairwise_distance_matrix(np.ones((5, 9))) == 0)


def test_pairwise_three_rows():
    rows = np.array([[0.0, 0.0], [3.0, 4.0], [6.0, 8.0]])
    D = pairwise_distance_matrix(rows)
    expected = [[feature_distance(rows[i], rows[j]) for j in range(3)] for i in range(3)]
    np.testing.assert_allclose(D, expected)


def test_pairwise_brute_force(rng):
    rows = rng.normal(size=(64, 121))
    D = pairwise_distance_matrix(rows)
    brute = np.zeros((64, 64))
    for i in range(64):
        for j in range(64):
            brute[i, j] = np.sqrt(np.sum((rows[i] - rows[j]) ** 2))
    np.testing.assert_allclose(D, brute, rtol=1e-12, atol=1e-12)


@given(arrays(np.float64, (5, 7), elements=st.floats(-10, 10)))
def test_metric_properties(rows):
    D = pairwise_distance_matrix(rows)
    assert np.all(D >= 0) and np.all(np.diag(D) == 0)
    np.testing.assert_array_equal(D, D.T)
    for i, j, k in [(0, 1, 2), (1, 3, 4), (0, 4, 2)]:
        assert D[i, k] <= D[i, j] + D[j, k] + 1e-9


def test_translation_consistency(rng):
    frames = rng.uniform(size=(3, 30, 30))
    shifted = np.zeros_like(frames)
    shifted[:, 2:, 3:] = frames[:, :-2, :-3]
    a = extract_features(frames, (12, 14), 7).vectors
    b = extract_features(shifted, (15, 16), 7).vectors
    np.testing.assert_array_equal(a, b)


def test_consecutive_distances_match(small_seq):
    steps = consecutive_distances(small_seq.frames, 5)
    assert steps.shape == (5, 12, 12)
    fs = extract_features(small_seq, (9, 4), 5).vectors
    assert steps[3, 4 - 2, 9 - 2] == pytest.approx(feature_distance(fs[3], fs[4]), rel=1e-12)

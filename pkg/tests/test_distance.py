import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sigmetric.distance import (DistanceMeasure, dtw_distance, euclidean_distance, load_distance_matrix,
                                pairwise_matrix, save_distance_matrix)
from sigmetric.errors import ConfigError, DimensionError

from oracles import dtw_full_table


def test_dtw_hand_case():
    assert dtw_distance([0.0, 1.0, 2.0], [0.0, 2.0]) == 1.0


def test_euclidean_examples():
    assert euclidean_distance([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0
    x = np.random.default_rng(0).normal(size=(3, 7))
    assert euclidean_distance(x, x) == 0.0
    with pytest.raises(DimensionError):
        euclidean_distance(np.ones((2, 3)), np.ones((2, 4)))


def test_euclidean_matches_naive_sum():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(4, 9)), rng.normal(size=(4, 9))
    naive = 0.0
    for k in range(4):
        for t in range(9):
            naive += (x[k, t] - y[k, t]) ** 2
    assert abs(euclidean_distance(x, y) - naive ** 0.5) < 1e-6


def test_euclidean_triangle_inequality():
    rng = np.random.default_rng(2)
    for _ in range(200):
        a, b, c = rng.normal(size=(3, 2, 6))
        assert euclidean_distance(a, c) <= euclidean_distance(a, b) + euclidean_distance(b, c) + 1e-6


series = st.integers(1, 3).flatmap(
    lambda d: st.tuples(
        arrays(np.float64, st.tuples(st.just(d), st.integers(1, 16)), elements=st.floats(-5, 5)),
        arrays(np.float64, st.tuples(st.just(d), st.integers(1, 16)), elements=st.floats(-5, 5)),
    )
)


@settings(max_examples=150, deadline=None)
@given(series)
def test_dtw_matches_full_table(pair):
    x, y = pair
    assert dtw_distance(x, y) == dtw_full_table(x, y)
    assert dtw_distance(x, x) == 0.0
    assert dtw_distance(x, y) >= 0.0


@settings(max_examples=100, deadline=None)
@given(series)
def test_dtw_band_monotone(pair):
    x, y = pair
    lo = abs(x.shape[1] - y.shape[1])
    hi = max(x.shape[1], y.shape[1])
    values = [dtw_distance(x, y, band_radius=b) for b in range(lo, hi + 1)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert values[-1] == dtw_distance(x, y)
    assert dtw_distance(x, y, band_radius=lo + 1) == dtw_full_table(x, y, band=lo + 1)


def test_band_too_narrow():
    with pytest.raises(ConfigError):
        dtw_distance(np.ones(5), np.ones(8), band_radius=2)
    with pytest.raises(ConfigError):
        DistanceMeasure("dtw", band_radius=-1)
    with pytest.raises(ConfigError):
        DistanceMeasure("euclidean", band_radius=2)


def test_dtw_lead_mismatch():
    with pytest.raises(DimensionError):
        dtw_distance(np.ones((2, 4)), np.ones((3, 4)))


def test_pairwise_matches_per_pair():
    rng = np.random.default_rng(3)
    batch = list(rng.normal(size=(4, 2, 12)))
    m = pairwise_matrix(batch, DistanceMeasure("dtw"), check_symmetry=True)
    for i, j in itertools.product(range(4), repeat=2):
        expected = 0.0 if i == j else dtw_distance(batch[i], batch[j])
        assert m.values[i, j] == expected
    np.testing.assert_array_equal(m.values, m.values.T)


def test_pairwise_identical_and_distinct():
    x = np.ones((2, 5))
    assert not pairwise_matrix([x, x], DistanceMeasure("dtw")).values.any()
    rng = np.random.default_rng(4)
    e = pairwise_matrix(list(rng.normal(size=(5, 2, 5))), DistanceMeasure("euclidean")).values
    assert (e[~np.eye(5, dtype=bool)] > 0).all() and not np.diag(e).any()


def test_pairwise_order_independent():
    rng = np.random.default_rng(5)
    batch = rng.normal(size=(5, 2, 10))
    perm = rng.permutation(5)
    a = pairwise_matrix(list(batch), DistanceMeasure("dtw")).values
    b = pairwise_matrix(list(batch[perm]), DistanceMeasure("dtw")).values
    np.testing.assert_array_equal(a[np.ix_(perm, perm)], b)


def test_pairwise_shape_errors():
    with pytest.raises(DimensionError, match=r"pair \(0, 1\)"):
        pairwise_matrix([np.ones((2, 4)), np.ones((2, 5))], DistanceMeasure("dtw"))
    with pytest.raises(DimensionError):
        pairwise_matrix([], DistanceMeasure("dtw"))


def test_z_normalize_flag():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 20))
    assert dtw_distance(x, 3 * x + 1, z_normalize=True) < 1e-9
    assert DistanceMeasure("euclidean", z_normalize=True)(x, 2 * x) < 1e-9


def test_matrix_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    m = pairwise_matrix(list(rng.normal(size=(3, 2, 6))), DistanceMeasure("dtw", band_radius=2))
    save_distance_matrix(tmp_path / "m", m)
    back = load_distance_matrix(tmp_path / "m")
    np.testing.assert_array_equal(back.values, m.values.astype(np.float32))
    assert back.measure == m.measure

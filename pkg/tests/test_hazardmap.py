import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hazardnav.hazardmap import (
    GridFormatError,
    d_max,
    format_mask,
    format_score_map,
    hazard_set,
    manhattan_distance_field,
    read_mask,
    read_score_map,
    signed_boundary_distance,
    threshold_mask,
    write_mask,
    write_score_map,
)

from oracles import brute_force_l1


def test_threshold_endpoints(rng):
    scores = rng.random((5, 7))
    assert threshold_mask(scores, 1.0).all()
    assert not threshold_mask(np.minimum(scores, 0.999), 0.0).any()


def test_threshold_direct_comparison():
    scores = np.array([[0.9, 0.2], [0.4, 0.6]])
    np.testing.assert_array_equal(threshold_mask(scores, 0.5), [[1, 0], [0, 1]])


def test_threshold_includes_ties():
    assert threshold_mask(np.array([[0.5]]), 0.5)[0, 0]


def test_threshold_rejects_bad_inputs():
    with pytest.raises(ValueError):
        threshold_mask(np.array([[0.5]]), 1.5)
    with pytest.raises(GridFormatError):
        threshold_mask(np.array([[1.2]]), 0.5)


@settings(max_examples=200, deadline=None)
@given(
    scores=arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)),
                  elements=st.floats(0, 1)),
    l1=st.floats(0, 1),
    l2=st.floats(0, 1),
)
def test_threshold_nested(scores, l1, l2):
    lo, hi = sorted((l1, l2))
    small, big = threshold_mask(scores, lo), threshold_mask(scores, hi)
    assert small.shape == big.shape == scores.shape
    assert not (small & ~big).any()


@pytest.mark.parametrize(
    "mask, expected",
    [
        (np.zeros((2, 2), bool), set()),
        (np.ones((2, 2), bool), {(0, 0), (0, 1), (1, 0), (1, 1)}),
        (np.array([[1, 0], [0, 1]], bool), {(0, 0), (1, 1)}),
    ],
)
def test_hazard_set(mask, expected):
    assert hazard_set(mask) == expected


def test_distance_single_corner_pixel():
    mask = np.zeros((3, 3), bool)
    mask[0, 0] = True
    assert manhattan_distance_field(mask)[2, 2] == 4


def test_distance_empty_mask_sentinel():
    field = manhattan_distance_field(np.zeros((4, 4), bool))
    assert (field == 8).all() and d_max((4, 4)) == 8


def test_distance_field_random_8x8(rng):
    mask = rng.random((8, 8)) < 0.15
    np.testing.assert_array_equal(manhattan_distance_field(mask), brute_force_l1(mask))


@settings(max_examples=100, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(1, 16), st.integers(1, 16))))
def test_distance_field_matches_brute_force(mask):
    np.testing.assert_array_equal(manhattan_distance_field(mask), brute_force_l1(mask))


def test_signed_distance_layers():
    mask = np.zeros((7, 7), bool)
    mask[1:6, 1:6] = True
    sd = signed_boundary_distance(mask)
    assert sd[1, 1] == 0 and sd[1, 3] == 0  # inner boundary
    assert sd[2, 2] == 1 and sd[3, 3] == 2
    assert sd[0, 3] == -1 and sd[0, 0] == -2


def test_score_map_roundtrip(tmp_path, rng):
    scores = np.round(rng.random((3, 4)), 6)
    path = tmp_path / "s.txt"
    write_score_map(path, scores)
    assert path.read_text().splitlines()[0] == "3 4"
    np.testing.assert_array_equal(read_score_map(path), scores)


def test_mask_roundtrip(tmp_path, rng):
    mask = rng.random((5, 2)) < 0.5
    path = tmp_path / "m.txt"
    write_mask(path, mask)
    np.testing.assert_array_equal(read_mask(path), mask)
    assert format_mask(mask).startswith("5 2\n")


def test_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("2 2\n0.1 0.2\n0.3 1.2\n")
    with pytest.raises(GridFormatError, match=r"bad\.txt:3"):
        read_score_map(path)


def test_parse_error_on_bad_mask_entry(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("1 2\n0 2\n")
    with pytest.raises(GridFormatError, match=":2"):
        read_mask(path)


def test_parse_error_on_row_count(tmp_path):
    path = tmp_path / "short.txt"
    path.write_text("3 1\n0.1\n0.2\n")
    with pytest.raises(GridFormatError, match="expected 3 rows"):
        read_score_map(path)


def test_format_is_fixed_precision():
    assert format_score_map(np.array([[0.25, 1.0]])) == "1 2\n0.250000 1.000000\n"

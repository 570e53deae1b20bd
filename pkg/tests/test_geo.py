import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmscan.errors import ConfigError, InputError
from fmscan.geo import (
    Location,
    distance_matrix,
    enumerate_windows,
    read_locations,
    window_matrix,
)

_coords = st.lists(
    st.tuples(st.integers(0, 100), st.integers(0, 100)),
    min_size=2,
    max_size=15,
    unique=True,
)


def test_geo_distance_matrix():
    xy = np.array([[0.0, 0.0], [3.0, 4.0], [6.0, 8.0]])
    act = distance_matrix(xy)
    exp = np.array([[0, 5, 10], [5, 0, 5], [10, 5, 0]], dtype=float)
    np.testing.assert_allclose(act, exp)

    act = distance_matrix([Location("a", 0, 0), Location("b", 3, 4)])
    np.testing.assert_allclose(act, [[0, 5], [5, 0]])


def test_geo_distance_matrix_invalid():
    with pytest.raises(InputError):
        distance_matrix(np.array([[0.0, 0.0]]))
    with pytest.raises(InputError):
        distance_matrix(np.array([[0.0, 0.0], [np.nan, 1.0]]))


def test_geo_enumerate_windows_line():
    d = distance_matrix(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]))
    act = [w.members for w in enumerate_windows(d, 0.5)]
    assert act == [(0,), (1,), (2,)]


def test_geo_enumerate_windows_ties_not_split():
    d = distance_matrix(np.column_stack([np.arange(6.0), np.zeros(6)]))
    wins = enumerate_windows(d, 0.5)
    from_center_1 = [w.members for w in wins if w.center == 1]
    # 0 and 2 are equidistant from 1, (0, 1, 2) was already found from 0
    assert from_center_1 == [(1,)]
    assert [w.members for w in wins if w.center == 0] == [(0,), (0, 1), (0, 1, 2)]
    assert max(len(w) for w in wins) == 3


def test_geo_enumerate_windows_population():
    d = distance_matrix(np.column_stack([np.arange(4.0), np.zeros(4)]))
    pop = np.array([10.0, 10.0, 10.0, 70.0])
    wins = enumerate_windows(d, 0.5, pop, by="population")
    for w in wins:
        if len(w) > 1:
            assert pop[list(w.members)].sum() <= 50
    # the radius-0 window of a large location is kept
    assert (3,) in [w.members for w in wins]


def test_geo_enumerate_windows_small_fraction():
    d = distance_matrix(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]))
    assert [w.members for w in enumerate_windows(d, 0.3)] == [(0,), (1,), (2,)]
    xy = np.random.default_rng(0).uniform(0, 100, size=(94, 2))
    wins = enumerate_windows(distance_matrix(xy), 0.01)
    assert sorted(w.members for w in wins) == [(i,) for i in range(94)]
    assert all(w.radius == 0 for w in wins)


def test_geo_enumerate_windows_invalid():
    d = distance_matrix(np.array([[0.0, 0.0], [1.0, 0.0]]))
    for frac in (0, 0.6, -1):
        with pytest.raises(ConfigError):
            enumerate_windows(d, frac)
    with pytest.raises(ConfigError):
        enumerate_windows(d, 0.5, by="population")
    with pytest.raises(ConfigError):
        enumerate_windows(d, 0.5, by="area")


@settings(max_examples=50, deadline=None)
@given(_coords)
def test_geo_enumerate_windows_closed(coords):
    xy = np.array(coords, dtype=float)
    n = len(xy)
    d = distance_matrix(xy)
    wins = enumerate_windows(d, 0.5)
    sets = [w.members for w in wins]
    assert len(sets) == len(set(sets))
    assert {(i,) for i in range(n)} <= set(sets)
    for w in wins:
        assert 1 <= len(w) <= math.floor(0.5 * n)
        inside = np.zeros(n, dtype=bool)
        inside[list(w.members)] = True
        assert np.all(d[w.center, inside] <= w.radius)
        assert np.all(d[w.center, ~inside] > w.radius)


def test_geo_window_matrix():
    d = distance_matrix(np.column_stack([np.arange(6.0), np.zeros(6)]))
    wins = enumerate_windows(d, 0.5)
    act = window_matrix(wins, 6)
    assert act.shape == (len(wins), 6)
    assert act.sum(axis=1).tolist() == [len(w) for w in wins]


def test_geo_read_locations(tmp_path):
    pth = tmp_path / "loc.csv"
    pth.write_text("id,x,y,name\n001,0,0,a\n002,3,4,b\n")
    act = read_locations(pth)
    assert act == [Location("001", 0.0, 0.0), Location("002", 3.0, 4.0)]

    pth.write_text("id,x\n1,0\n")
    with pytest.raises(InputError) as ex:
        read_locations(pth)
    assert ex.value.detail == {"columns": ["y"]}

    pth.write_text("id,x,y\n1,0,0\n2,,4\n")
    with pytest.raises(InputError):
        read_locations(pth)

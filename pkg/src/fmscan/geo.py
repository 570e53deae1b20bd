"""Locations, distances, and the set of circular scanning windows."""
import logging
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import distance

from fmscan.errors import ConfigError, InputError

_logger = logging.getLogger(__name__)

_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class Location:
    """A spatial unit, identified by an opaque string, at planar ``(x, y)``."""

    id: str
    x: float
    y: float


@dataclass(frozen=True)
class PotentialCluster:
    """A circular window: every location within ``radius`` of ``center``.

    Attributes
    ----------
    members : tuple of int
        Sorted location indices inside the window.
    center : int
        Index of the location the window is centered on.
    radius : float
        Distance from the center to the farthest member.
    """

    members: Tuple[int, ...]
    center: int
    radius: float

    def __len__(self):
        return len(self.members)


def _coords(locations):
    if isinstance(locations, np.ndarray):
        xy = np.asarray(locations, dtype=float)
    else:
        xy = np.array([[loc.x, loc.y] for loc in locations], dtype=float)
    if xy.ndim != 2 or xy.shape[1] != 2:
        raise InputError(f"expected n x 2 coordinates, got shape {xy.shape}")
    return xy


def distance_matrix(locations):
    """Euclidean distance matrix between locations.

    Parameters
    ----------
    locations : sequence of Location, or numpy.ndarray
        Locations, or an ``n x 2`` array of planar coordinates.

    Returns
    -------
    numpy.ndarray
        Symmetric ``n x n`` matrix with zero diagonal.

    Examples
    --------
    >>> from fmscan.geo import Location, distance_matrix
    >>> distance_matrix([Location("a", 0, 0), Location("b", 3, 4)])
    array([[0., 5.],
           [5., 0.]])
    """
    xy = _coords(locations)
    n = xy.shape[0]
    if n < 2:
        raise InputError(f"need at least 2 locations, got {n}")
    bad = ~np.isfinite(xy).all(axis=1)
    if bad.any():
        idx = np.flatnonzero(bad).tolist()
        raise InputError(
            f"non-finite coordinates at location indices {idx}",
            {"indices": idx},
        )
    return distance.squareform(distance.pdist(xy))


def _cap(n, max_fraction, populations, by):
    if not 0 < max_fraction <= 0.5:
        raise ConfigError(
            f"Invalid max_fraction {max_fraction}, must be in (0, 0.5]",
            {"max_fraction": max_fraction},
        )
    if by == "count":
        return max(1, math.floor(max_fraction * n)), None
    elif by == "population":
        if populations is None:
            raise ConfigError("max_fraction_by='population' requires populations")
        pop = np.asarray(populations, dtype=float)
        if pop.shape != (n,):
            raise InputError(f"populations must have length {n}, got {pop.shape}")
        return n - 1, max_fraction * pop.sum()
    else:
        raise ConfigError(f"Invalid by '{by}', either 'count' or 'population'")


def enumerate_windows(
    distances, max_fraction=0.5, populations=None, by="count"
) -> Sequence[PotentialCluster]:
    """Enumerate variable-radius circular windows.

    For each center the window grows by nearest-neighbour inclusion until the
    size cap is hit. Equidistant neighbours join in one step, so a tie is never
    split. Member sets found from an earlier center are not repeated.

    Parameters
    ----------
    distances : numpy.ndarray
        Symmetric distance matrix, see :func:`distance_matrix`.
    max_fraction : float
        Largest share of the region a window may cover, in ``(0, 0.5]``.
    populations : array_like, optional
        At-risk populations, needed when ``by='population'``.
    by : str
        ``count`` caps the number of locations at ``floor(max_fraction * n)``,
        at least 1. ``population`` caps the covered population at
        ``max_fraction`` of the total. The radius-0 window of each center is
        always kept.

    Returns
    -------
    list of PotentialCluster
        Ordered by center index, then size.

    Examples
    --------
    >>> import numpy as np
    >>> from fmscan.geo import distance_matrix, enumerate_windows
    >>> d = distance_matrix(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]))
    >>> [w.members for w in enumerate_windows(d, 0.5)]
    [(0,), (1,), (2,)]
    """
    d = np.asarray(distances, dtype=float)
    n = d.shape[0]
    cap, cap_pop = _cap(n, max_fraction, populations, by)
    pop = None if cap_pop is None else np.asarray(populations, dtype=float)
    tol = _TIE_RTOL * max(float(d.max()), 1.0)

    seen = set()
    res = []
    for i in range(n):
        order = np.argsort(d[i], kind="stable")
        dist = d[i, order]
        ends = np.append(np.flatnonzero(np.diff(dist) > tol) + 1, n)
        pop_cum = None if pop is None else np.cumsum(pop[order])
        for k, e in enumerate(ends):
            if (k > 0 and e > cap) or e >= n:
                break
            if pop_cum is not None and k > 0 and pop_cum[e - 1] > cap_pop:
                break
            members = tuple(sorted(order[:e].tolist()))
            if members in seen:
                continue
            seen.add(members)
            res.append(PotentialCluster(members, i, float(dist[e - 1])))
    _logger.info(f"enumerated {len(res)} windows over {n} locations")
    return res


def window_matrix(windows, n):
    """Boolean ``(n_windows, n)`` membership matrix of windows."""
    mat = np.zeros((len(windows), n), dtype=bool)
    for k, w in enumerate(windows):
        mat[k, list(w.members)] = True
    return mat


def read_locations(pth):
    """Read locations from a CSV with header ``id,x,y``.

    Extra columns are ignored. Ids are read as strings.

    Returns
    -------
    list of Location
    """
    df = pd.read_csv(pth, dtype={"id": str}, encoding="utf-8")
    missing = [c for c in ("id", "x", "y") if c not in df.columns]
    if missing:
        raise InputError(f"{pth}: missing columns {missing}", {"columns": missing})
    bad = df.loc[~np.isfinite(df[["x", "y"]].to_numpy(dtype=float)).all(axis=1), "id"]
    if len(bad):
        raise InputError(
            f"{pth}: non-finite coordinates for ids {bad.tolist()}",
            {"ids": bad.tolist()},
        )
    _logger.debug(f"read {len(df)} locations from {pth}")
    return [Location(r.id, float(r.x), float(r.y)) for r in df.itertuples()]

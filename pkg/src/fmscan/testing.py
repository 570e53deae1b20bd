import logging

import numpy as np
import pandas as pd
from scipy import special

from fmscan.fda import LongitudinalSeries
from fmscan.region import StudyRegion
from fmscan.sim import tent

_logger = logging.getLogger(__name__)


def _grid_coords(n, rng):
    side = int(np.ceil(np.sqrt(n)))
    cells = np.array([(i % side, i // side) for i in range(n)], dtype=float)
    return cells * 10 + rng.uniform(-2, 2, size=(n, 2))


def make_test_region(
    n=20,
    seed=0,
    family="poisson",
    p=1,
    m=25,
    domain=(0.0, 21.0),
    relative_risk=3.0,
    cluster_size=4,
):
    """Make a small synthetic study region with a planted cluster.

    Locations sit on a jittered square grid 10 apart; the planted cluster is
    location ``L01`` and its ``cluster_size - 1`` nearest neighbours. Each
    location carries ``m`` noisy observations of a shifted tent curve whose
    mean enters the outcome model, and ``p`` standard normal covariates.

    Args
    ----
    n : int
        Number of locations.
    seed : int
    family : str
        ``poisson``, ``bernoulli`` or ``gaussian``.
    p : int
        Number of scalar covariates, 0 for none.
    m : int
        Observations per series.
    domain : (float, float)
    relative_risk : float
        Multiplier of the planted cluster on the mean scale (Poisson), the
        odds scale (Bernoulli), or ``log(relative_risk)`` added (Gaussian).
    cluster_size : int

    Returns
    -------
    fmscan.region.StudyRegion

    Examples
    --------
    >>> from fmscan.testing import make_test_region
    >>> make_test_region(n=12, p=2)
    StudyRegion(n=12, p=2, series=True)
    """
    rng = np.random.default_rng(seed)
    ids = [f"L{i + 1:02d}" for i in range(n)]
    coords = _grid_coords(n, rng)
    pop = rng.integers(5000, 50000, size=n).astype(float)
    Z = rng.normal(size=(n, p))
    cov = pd.DataFrame(Z, columns=[f"z{j + 1}" for j in range(p)]) if p else None

    t = np.linspace(*domain, m)
    u = rng.uniform(size=n)
    curves = u[:, None] * tent(t)[None, :] + (1 - u)[:, None] * tent(t + 4)[None, :]
    obs = curves + rng.normal(0, 0.25, size=curves.shape)
    series = [LongitudinalSeries(i, t, v) for i, v in zip(ids, obs)]

    d = np.hypot(*(coords - coords[0]).T)
    xi = np.zeros(n)
    xi[np.argsort(d, kind="stable")[:cluster_size]] = 1.0
    effect = 0.3 * (Z[:, 0] if p else 0) + 0.2 * (curves.mean(1) - curves.mean())
    effect = effect + np.log(relative_risk) * xi

    if family == "poisson":
        y = rng.poisson(pop * np.exp(-7 + effect))
    elif family == "bernoulli":
        y = rng.binomial(1, special.expit(-0.5 + effect))
    elif family == "gaussian":
        y = 10 + effect + rng.normal(0, 0.5, size=n)
    else:
        raise ValueError(
            f"Invalid family '{family}', either 'poisson', 'bernoulli' or 'gaussian'"
        )
    _logger.debug(f"test region: n={n}, family {family}, {int(xi.sum())} in cluster")
    return StudyRegion(ids, coords, y.astype(float), pop, cov, series)

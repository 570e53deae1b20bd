"""Window fits, the scan statistic, Monte Carlo significance and secondary
clusters.

Under the alternative for window ``k`` the linear predictor gains
``delta_k * xi_k`` with ``xi_k`` the window indicator, while the null covariate
effects stay as a fixed offset. For Poisson the fit has closed forms in the
observed counts ``O`` and adjusted populations ``N~``; other families are
maximised numerically.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Tuple

import numpy as np
import pandas as pd
from scipy import special

from fmscan import glm
from fmscan.errors import FitError, FmscanError, InputError, ScanError, WindowError
from fmscan.geo import PotentialCluster, window_matrix

_logger = logging.getLogger(__name__)

_SIDES = ("two-sided", "high", "low")


@dataclass(frozen=True)
class WindowFit:
    """Alternative-hypothesis fit of one window.

    Attributes
    ----------
    k : int
        Window index.
    alpha : float
        Intercept under the alternative.
    delta : float
        Log relative risk of the window, ``-inf`` when nothing is observed
        inside under Poisson.
    llr : float
        Log-likelihood ratio against the null, ``nan`` when the fit failed.
    observed : float
        Sum of outcomes inside the window.
    expected : float
        Sum of adjusted populations inside the window (Poisson), or the
        window size otherwise.
    converged : bool
    """

    k: int
    alpha: float
    delta: float
    llr: float
    observed: float
    expected: float
    converged: bool = True

    @property
    def direction(self):
        if self.delta > 0:
            return "high"
        elif self.delta < 0:
            return "low"
        return "none"

    @property
    def relative_risk(self):
        return float(np.exp(self.delta))


@dataclass(frozen=True)
class Cluster:
    """A reported cluster: rank 1 is the most likely cluster."""

    rank: int
    window: PotentialCluster
    fit: WindowFit
    p_value: float


@dataclass(frozen=True, eq=False)
class ScanResult:
    """Outcome of :func:`run_scan`, completed by :func:`monte_carlo_pvalues`
    and :func:`secondary_clusters`.

    Attributes
    ----------
    windows : tuple of PotentialCluster
    fits : tuple of WindowFit
        One per window, same order.
    mlc : int
        Index of the most likely cluster.
    lam : float
        The scan statistic, ``max_k LLR_k``.
    family : str
    sides : str
        ``two-sided``, ``high`` or ``low``.
    n_failed : int
        Windows excluded because their fit failed.
    replicates : numpy.ndarray
        Monte Carlo statistics ``lambda^(1..M)``, empty before
        :func:`monte_carlo_pvalues`.
    p_value : float
        Monte Carlo p-value of ``lam``.
    n_failed_replicates : int
        Replicates counted as ``+inf`` after failing twice.
    clusters : tuple of Cluster
    """

    windows: Tuple[PotentialCluster, ...]
    fits: Tuple[WindowFit, ...]
    mlc: int
    lam: float
    family: str
    sides: str = "two-sided"
    n_failed: int = 0
    replicates: np.ndarray = field(default_factory=lambda: np.empty(0))
    p_value: float = math.nan
    n_failed_replicates: int = 0
    clusters: Tuple[Cluster, ...] = ()

    @property
    def mlc_window(self):
        return self.windows[self.mlc]

    @property
    def mlc_fit(self):
        return self.fits[self.mlc]

    def table(self):
        """All window fits as a data frame, one row per window."""
        return pd.DataFrame(
            {
                "k": [f.k for f in self.fits],
                "center": [w.center for w in self.windows],
                "radius": [w.radius for w in self.windows],
                "n_members": [len(w) for w in self.windows],
                "alpha": [f.alpha for f in self.fits],
                "delta": [f.delta for f in self.fits],
                "llr": [f.llr for f in self.fits],
                "observed": [f.observed for f in self.fits],
                "expected": [f.expected for f in self.fits],
                "converged": [f.converged for f in self.fits],
            }
        )


def _members(window):
    if isinstance(window, PotentialCluster):
        return list(window.members)
    return sorted(int(_) for _ in window)


def _check_sides(sides):
    if sides not in _SIDES:
        raise ValueError(
            f"Invalid sides '{sides}', either 'two-sided', 'high' or 'low'"
        )


def _poisson_stats(ok, nk, o, n):
    """Closed-form alpha, delta and LLR, vectorised over windows."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out_rate = (o - ok) / (n - nk)
        in_rate = ok / nk
        alpha = np.log(out_rate)
        delta = np.log(in_rate) - alpha
        llr = (
            special.xlogy(ok, in_rate)
            + special.xlogy(o - ok, out_rate)
            - special.xlogy(o, o / n)
        )
    # both rates zero
    delta = np.where(np.isnan(delta), 0.0, delta)
    return alpha, delta, np.maximum(llr, 0.0)


def _one_sided(llr, delta, sides):
    if sides == "high":
        keep = delta > 0
    elif sides == "low":
        keep = delta < 0
    else:
        return llr
    # failed fits stay nan so they never become the most likely cluster
    return np.where(keep | np.isnan(llr), llr, 0.0)


def poisson_window_fit(window, Y, N, k=0):
    """Closed-form Poisson fit of one window.

    Parameters
    ----------
    window : PotentialCluster or sequence of int
    Y : array_like
        Observed counts.
    N : array_like
        Adjusted populations ``N~``, all positive.
    k : int
        Index recorded in the result.

    Returns
    -------
    WindowFit

    Examples
    --------
    >>> from fmscan.scan import poisson_window_fit
    >>> fit = poisson_window_fit([0], [2, 1], [1.0, 1.0])
    >>> round(fit.delta, 4), round(fit.llr, 4)
    (0.6931, 0.1699)
    """
    Y = np.asarray(Y, dtype=float)
    N = np.asarray(N, dtype=float)
    if np.any(N <= 0):
        raise InputError("adjusted populations must be positive")
    idx = _members(window)
    if not idx:
        raise WindowError(f"window {k} is empty")
    if len(set(idx)) >= Y.size:
        raise WindowError(
            f"window {k} covers all {Y.size} locations", {"window": k}
        )
    ok, nk = Y[idx].sum(), N[idx].sum()
    alpha, delta, llr = _poisson_stats(ok, nk, Y.sum(), N.sum())
    return WindowFit(k, float(alpha), float(delta), float(llr), float(ok), float(nk))


def _generic_fit(y, xi, fam, offset, null_ll, k):
    X = np.column_stack([np.ones(y.size), xi])
    ok, nk = float(y[xi > 0].sum()), float(xi.sum())
    try:
        fit = glm.fit_glm(y, X, fam, offset, ("intercept", "window"))
    except FitError as ex:
        _logger.debug(f"window {k} failed: {ex}")
        return WindowFit(k, math.nan, math.nan, math.nan, ok, nk, False)
    if not fit.converged:
        _logger.debug(f"window {k} did not converge")
        alpha, delta = (float(_) for _ in fit.coef)
        return WindowFit(k, alpha, delta, math.nan, ok, nk, False)
    llr = max(fit.loglik - null_ll, 0.0)
    return WindowFit(k, float(fit.coef[0]), float(fit.coef[1]), llr, ok, nk)


def generic_window_fit(window, y, fam, null_fit, k=0):
    """Numeric fit of ``(alpha, delta)`` for one window, any family.

    The null covariate effects (plus ``log N`` for Poisson) enter as a fixed
    offset. A fit that fails or does not converge is returned with
    ``converged=False`` and ``llr=nan``.

    Parameters
    ----------
    window : PotentialCluster or sequence of int
    y : array_like
        Outcomes.
    fam : str or fmscan.glm._Family
    null_fit : fmscan.glm.NullFit
    k : int
        Index recorded in the result.

    Returns
    -------
    WindowFit
    """
    fam = glm.family(fam)
    y = np.asarray(y, dtype=float)
    idx = _members(window)
    if not idx:
        raise WindowError(f"window {k} is empty")
    if len(set(idx)) >= y.size:
        raise WindowError(
            f"window {k} covers all {y.size} locations", {"window": k}
        )
    xi = np.zeros(y.size)
    xi[idx] = 1.0
    return _generic_fit(y, xi, fam, null_fit.base_offset, null_fit.loglik, k)


def _scan_arrays(y, mat, null_fit, fam, closed_form):
    """alpha, delta, llr, observed, expected and converged arrays."""
    n_win = mat.shape[0]
    if np.any(mat.sum(axis=1) >= y.size):
        raise WindowError("a window covers all locations")
    if closed_form:
        nt = null_fit.adjusted_populations
        if nt is None:
            raise ScanError("closed-form scan needs adjusted populations")
        w = mat.astype(float)
        ok, nk = w @ y, w @ nt
        alpha, delta, llr = _poisson_stats(ok, nk, y.sum(), nt.sum())
        return alpha, delta, llr, ok, nk, np.ones(n_win, dtype=bool)
    off = null_fit.base_offset
    fits = [
        _generic_fit(y, mat[k].astype(float), fam, off, null_fit.loglik, k)
        for k in range(n_win)
    ]
    cols = zip(*[(f.alpha, f.delta, f.llr, f.observed, f.expected) for f in fits])
    alpha, delta, llr, ok, nk = (np.array(c, dtype=float) for c in cols)
    return alpha, delta, llr, ok, nk, np.array([f.converged for f in fits])


def _best(llr, sizes, centers):
    """Index of the largest LLR; ties go to smaller windows, then lower centers."""
    key = np.where(np.isnan(llr), -np.inf, llr)
    order = np.lexsort((centers, sizes, -key))
    return int(order[0])


def run_scan(
    region, windows, null_fit, fam="poisson", sides="two-sided", closed_form=None
):
    """Fit every window and pick the most likely cluster.

    Parameters
    ----------
    region : fmscan.region.StudyRegion or array_like
        The region, whose ``cases`` are scanned, or the outcomes directly.
    windows : sequence of PotentialCluster
    null_fit : fmscan.glm.NullFit
    fam : str or fmscan.glm._Family
    sides : str
        ``two-sided`` lets high- and low-risk windows compete; ``high`` and
        ``low`` give windows in the other direction an LLR of 0.
    closed_form : bool, optional
        Use the Poisson closed forms. Defaults to ``True`` for Poisson.

    Returns
    -------
    ScanResult
    """
    fam = glm.family(fam)
    _check_sides(sides)
    y = np.asarray(getattr(region, "cases", region), dtype=float)
    if not windows:
        raise ScanError("no windows to scan")
    if closed_form is None:
        closed_form = fam.nme == "poisson"
    mat = window_matrix(windows, y.size)
    alpha, delta, llr, ok, nk, conv = _scan_arrays(y, mat, null_fit, fam, closed_form)
    llr = np.where(conv, _one_sided(llr, delta, sides), np.nan)
    n_failed = int(np.sum(~conv))
    if n_failed:
        _logger.warning(f"{n_failed} of {len(windows)} window fits failed, excluded")
    if n_failed == len(windows):
        raise ScanError(f"all {n_failed} window fits failed")
    sizes = np.array([len(w) for w in windows])
    centers = np.array([w.center for w in windows])
    best = _best(llr, sizes, centers)
    fits = tuple(
        WindowFit(k, alpha[k], delta[k], llr[k], ok[k], nk[k], bool(conv[k]))
        for k in range(len(windows))
    )
    _logger.info(
        f"scan over {len(windows)} windows: lambda={llr[best]:.6f}, "
        f"MLC center {centers[best]} with {sizes[best]} members"
    )
    return ScanResult(
        tuple(windows), fits, best, float(llr[best]), fam.nme, sides, n_failed
    )


def dwass_pvalue(lam, replicates):
    """Monte Carlo p-value ``(1 + #{lambda^(m) >= lam}) / (M + 1)``.

    Examples
    --------
    >>> from fmscan.scan import dwass_pvalue
    >>> dwass_pvalue(6.0, [5.0, 3.0, 8.0, 1.0])
    0.4
    """
    reps = np.asarray(replicates, dtype=float)
    if reps.size < 1:
        raise ValueError("need at least one replicate")
    return float((1 + np.sum(reps >= lam)) / (reps.size + 1))


def _frozen_null(y, null_fit, fam):
    """Null fit with covariate effects held fixed, only the intercept redone."""
    off = null_fit.base_offset
    fit = glm.fit_glm(y, np.ones((y.size, 1)), fam, off, ("intercept",))
    if not fit.converged:
        raise FitError("intercept-only null did not converge")
    alpha, mu, ll = float(fit.coef[0]), fit.mu, fit.loglik
    if fam.nme == "poisson":
        if y.sum() <= 0:
            raise FitError("no cases observed, intercept undefined")
        alpha = float(np.log(y.sum() / null_fit.adjusted_populations.sum()))
        mu = null_fit.adjusted_populations * np.exp(alpha)
        ll = fam.loglik(y, mu)
    return replace(null_fit, alpha=alpha, mu=mu, loglik=ll, scale=fam.scale(y, mu))


def _replicate_stat(y, task):
    fam = glm.family(task["family"])
    null_fit = task["null_fit"]
    if task["refit"]:
        null = glm.fit_null(
            y, fam, task["populations"], task["Z"], task["C"], null_fit.J
        )
    else:
        null = _frozen_null(y, null_fit, fam)
    alpha, delta, llr, *_, conv = _scan_arrays(
        y, task["mat"], null, fam, task["closed_form"]
    )
    llr = _one_sided(llr, delta, task["sides"])
    if not conv.any():
        raise ScanError("all window fits failed")
    return float(np.nanmax(np.where(conv, llr, np.nan)))


def _replicate(args):
    m, task = args
    fam = glm.family(task["family"])
    null_fit = task["null_fit"]
    for attempt in ((m,), (m, 1)):
        rng = np.random.default_rng(
            np.random.SeedSequence(task["seed"], spawn_key=attempt)
        )
        y = fam.sample(rng, null_fit.mu, null_fit.scale)
        try:
            return _replicate_stat(y, task), False
        except FmscanError as ex:
            _logger.debug(f"replicate {m} attempt {attempt} failed: {ex}")
    return math.inf, True


def monte_carlo_pvalues(
    result,
    null_fit,
    M=999,
    seed=0,
    populations=None,
    Z=None,
    C=None,
    refit=True,
    n_jobs=1,
):
    """Monte Carlo significance of the scan statistic.

    Each replicate draws outcomes from the fitted null, refits the null with
    the same truncation ``J`` (or, with ``refit=False``, keeps the covariate
    effects and redoes only the intercept), rescans and records
    ``lambda^(m)``. Replicate ``m`` draws from its own stream
    ``SeedSequence(seed, spawn_key=(m,))``, so results do not depend on
    ``n_jobs``. A failed replicate is redrawn once from ``spawn_key=(m, 1)``,
    then counted as ``+inf``.

    Parameters
    ----------
    result : ScanResult
        Observed scan from :func:`run_scan`.
    null_fit : fmscan.glm.NullFit
    M : int
        Number of replicates.
    seed : int
    populations, Z, C : array_like, optional
        Inputs of :func:`fmscan.glm.fit_null`, needed when ``refit``.
    refit : bool
    n_jobs : int
        Worker processes; 1 runs in process.

    Returns
    -------
    ScanResult
        Copy of ``result`` with ``replicates`` and ``p_value`` filled in.
    """
    if M < 1:
        raise ValueError(f"Invalid M {M}, need at least 1")
    if seed is None:
        seed = np.random.SeedSequence().entropy
        _logger.info(f"no seed given, drew {seed}")
    fam = glm.family(result.family)
    n = null_fit.mu.size
    task = dict(
        family=fam.nme,
        null_fit=null_fit,
        refit=refit,
        populations=populations,
        Z=Z,
        C=C,
        mat=window_matrix(result.windows, n),
        closed_form=fam.nme == "poisson",
        sides=result.sides,
        seed=int(seed),
    )
    args = [(m, task) for m in range(M)]
    if n_jobs and n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            out = list(ex.map(_replicate, args, chunksize=max(1, M // (4 * n_jobs))))
    else:
        out = []
        for m, a in enumerate(args, 1):
            out.append(_replicate(a))
            if m % 100 == 0:
                _logger.info(f"Monte Carlo replicate {m}/{M}")
    reps = np.array([r for r, _ in out])
    n_bad = sum(bad for _, bad in out)
    if n_bad:
        _logger.warning(f"{n_bad} of {M} replicates failed twice, counted as +inf")
    p = dwass_pvalue(result.lam, reps)
    _logger.info(f"Monte Carlo: M={M}, p-value={p:.6g}")
    return replace(result, replicates=reps, p_value=p, n_failed_replicates=n_bad)


def secondary_clusters(result, level=0.05):
    """Most likely cluster followed by significant disjoint runners-up.

    Windows are taken by decreasing LLR (ties: smaller, then lower center).
    After the most likely cluster, a window is reported when its LLR-based
    p-value against ``result.replicates`` is at most ``level`` and it shares
    no location with any cluster already reported.

    Returns
    -------
    ScanResult
        Copy of ``result`` with ``clusters`` filled in.
    """
    reps = result.replicates
    llr = np.array([f.llr for f in result.fits], dtype=float)
    sizes = np.array([len(w) for w in result.windows])
    centers = np.array([w.center for w in result.windows])
    key = np.where(np.isnan(llr), -np.inf, llr)
    order = np.lexsort((centers, sizes, -key))
    taken = set(result.mlc_window.members)
    res = [Cluster(1, result.mlc_window, result.mlc_fit, result.p_value)]
    if reps.size:
        for k in order:
            if not key[k] > 0 or k == result.mlc:
                continue
            p = dwass_pvalue(llr[k], reps)
            if p > level:
                break
            members = set(result.windows[k].members)
            if members & taken:
                continue
            taken |= members
            res.append(Cluster(len(res) + 1, result.windows[k], result.fits[k], p))
    _logger.info(f"{len(res) - 1} secondary clusters at level {level}")
    return replace(result, clusters=tuple(res))

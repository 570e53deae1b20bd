import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from fmscan import fda, glm, scan
from fmscan.errors import InputError

_logger = logging.getLogger(__name__)

_DEFAULTS = dict(
    family="poisson",
    mode="functional",
    summary="mean",
    basis="bspline",
    degree=3,
    n_knots=13,
    n_basis=5,
    fourier_period=None,
    domain=None,
    inertia_cap=0.95,
    max_fraction=0.5,
    max_fraction_by="count",
    sides="two-sided",
    M=999,
    seed=0,
    refit=True,
    n_jobs=1,
    level=0.05,
    secondary_level=None,
)


@dataclass(frozen=True, eq=False)
class Adjustment:
    """Covariates of the null model for one adjustment mode.

    Attributes
    ----------
    Z : numpy.ndarray or None
        ``n x p`` scalar covariates, the series summary included in
        univariate mode.
    design : fmscan.fda.FunctionalDesign or None
        PCA of the series, functional or multivariate mode.
    bss : fmscan.fda._Basis or None
        Basis system, functional mode.
    grid : numpy.ndarray or None
        Common time grid, multivariate mode.
    """

    mode: str
    Z: Optional[np.ndarray] = None
    design: Optional[fda.FunctionalDesign] = None
    bss: Optional[object] = None
    grid: Optional[np.ndarray] = None

    @property
    def C(self):
        return None if self.design is None else self.design.C

    @property
    def eigenvalues(self):
        return None if self.design is None else self.design.eigenvalues


@dataclass(frozen=True, eq=False)
class Analysis:
    """Everything one run of the pipeline produces."""

    adjustment: Adjustment
    truncation: Optional[pd.DataFrame]
    null_fit: glm.NullFit
    result: scan.ScanResult
    theta: Optional[pd.DataFrame]
    level: float = 0.05

    @property
    def mode(self):
        return self.adjustment.mode

    @property
    def significant(self):
        """Most likely cluster significant at the run's level."""
        return self.result.p_value <= self.level


class _Pipe:
    """
    The pipeline class.

    Automatically instantiated via the :meth:`~fmscan.region.StudyRegion.pipe`
    method of a :class:`study region <fmscan.region.StudyRegion>`.

    Settings can all be passed in on instantiation, but it reads clearer to use
    the clause methods (:meth:`adjust`, :meth:`family`, :meth:`basis`,
    :meth:`windows`, :meth:`sides`, :meth:`inertia`, :meth:`monte_carlo`,
    :meth:`level`) to build up the run, then call one of the stage methods,
    which execute the pipeline up to the stage they need:

    * :meth:`adjustment` builds the covariates: scalar covariates only (``none``),
      plus the mean or median of each series (``univariate``), a PCA of the
      series on their common grid (``multivariate``), or a functional PCA of
      the smoothed series (``functional``).
    * :meth:`null` selects the truncation by AIC and fits the null model.
    * :meth:`scan` scans every window.
    * :meth:`run` adds Monte Carlo significance and secondary clusters.

    Clause methods return a new object; the original is left unchanged.

    Parameters
    ----------
    region : fmscan.region.StudyRegion
    kwargs :
        Settings, see :class:`fmscan.set_up.RunConfig` for their meaning.

    Examples
    --------
    >>> from fmscan.testing import make_test_region
    >>> region = make_test_region(n=20, seed=1)
    >>> res = (
    ...     region.pipe()
    ...     .adjust("univariate")
    ...     .monte_carlo(M=19, seed=2)
    ...     .run()
    ... )  # doctest: +SKIP
    >>> res.result.p_value  # doctest: +SKIP
    0.05
    """

    def __init__(self, region, **kwargs):
        unknown = set(kwargs) - set(_DEFAULTS)
        if unknown:
            raise TypeError(f"Unknown pipeline settings {sorted(unknown)}")
        self._region = region
        self._opts = {**_DEFAULTS, **kwargs}

    def __copy__(self):
        return type(self)(self._region, **self._opts)

    def __repr__(self):
        diff = {k: v for k, v in self._opts.items() if v != _DEFAULTS[k]}
        return f"_Pipe(n={self._region.n}, {diff})"

    def _set(self, **kwargs):
        _ = self.__copy__()
        _._opts.update(kwargs)
        return _

    @property
    def opts(self):
        return dict(self._opts)

    def adjust(self, mode, summary=None):
        """Set the adjustment mode.

        Parameters
        ----------
        mode : str
            ``none``, ``univariate``, ``multivariate`` or ``functional``.
        summary : str, optional
            ``mean`` or ``median``, univariate mode.

        Returns
        -------
        fmscan._pipe._Pipe
            New pipeline object with the setting changed.
        """
        if mode not in ("none", "univariate", "multivariate", "functional"):
            raise ValueError(
                f"Invalid mode '{mode}', either 'none', 'univariate', "
                "'multivariate' or 'functional'"
            )
        return self._set(mode=mode, summary=summary or self._opts["summary"])

    def family(self, fam):
        """Set the outcome family."""
        return self._set(family=glm.family(fam).nme)

    def basis(self, kind, domain=None, **kwargs):
        """Set the basis system of the functional mode.

        Parameters
        ----------
        kind : str
            ``bspline`` or ``fourier``.
        domain : (float, float), optional
            Interval ``T``, the range of observed times by default.
        kwargs :
            ``degree``, ``n_knots``, ``n_basis`` or ``fourier_period``.
        """
        bad = set(kwargs) - {"degree", "n_knots", "n_basis", "fourier_period"}
        if bad:
            raise TypeError(f"Unknown basis settings {sorted(bad)}")
        return self._set(basis=kind, domain=domain, **kwargs)

    def windows(self, max_fraction=0.5, by="count"):
        """Set the window size cap."""
        return self._set(max_fraction=max_fraction, max_fraction_by=by)

    def sides(self, sides):
        """Scan ``two-sided``, or for ``high`` or ``low`` risk only."""
        scan._check_sides(sides)
        return self._set(sides=sides)

    def inertia(self, cap):
        """Set the cumulative inertia cap of the truncation candidates."""
        return self._set(inertia_cap=cap)

    def monte_carlo(self, M=999, seed=0, refit=True, n_jobs=1):
        """Set the Monte Carlo replicates."""
        return self._set(M=M, seed=seed, refit=refit, n_jobs=n_jobs)

    def level(self, level, secondary=None):
        """Set the significance levels of the most likely and secondary clusters."""
        return self._set(level=level, secondary_level=secondary)

    def _basis_system(self):
        o = self._opts
        series = self._region.series
        domain = o["domain"]
        if domain is None:
            domain = (
                min(s.t.min() for s in series),
                max(s.t.max() for s in series),
            )
        if o["basis"] == "bspline":
            return fda.basis(
                "bspline", domain, degree=o["degree"], n_knots=o["n_knots"]
            )
        return fda.basis(
            "fourier", domain, n_basis=o["n_basis"], period=o["fourier_period"]
        )

    def adjustment(self):
        """Covariates of the null model.

        Returns
        -------
        Adjustment
        """
        o = self._opts
        mode = o["mode"]
        Z = self._region.Z
        if mode == "none":
            return Adjustment(mode, Z)
        series = self._region.series
        if series is None:
            raise InputError(f"mode '{mode}' needs longitudinal series")
        if mode == "univariate":
            s = fda.summarise_series(series, o["summary"])[:, None]
            return Adjustment(mode, s if Z is None else np.hstack([Z, s]))
        elif mode == "multivariate":
            grid, vals = fda.common_grid(series)
            design = fda.functional_pca(vals, np.eye(grid.size))
            return Adjustment(mode, Z, design, grid=grid)
        bss = self._basis_system()
        A = fda.smooth_series(series, bss)
        design = fda.functional_pca(A, fda.gram_matrix(bss))
        return Adjustment(mode, Z, design, bss)

    def _offset(self):
        if self._opts["family"] == "poisson":
            return np.log(self._region.populations)
        return None

    def null(self, adj=None):
        """Select the truncation and fit the null model.

        Returns
        -------
        (pandas.DataFrame or None, fmscan.glm.NullFit)
            Truncation table, None without series scores, and the null fit.
        """
        adj = self.adjustment() if adj is None else adj
        o = self._opts
        y = self._region.cases
        tbl, J = None, 0
        if adj.design is not None:
            J, tbl = glm.select_truncation(
                y,
                adj.Z,
                adj.C,
                adj.eigenvalues,
                o["family"],
                self._offset(),
                o["inertia_cap"],
                return_table=True,
            )
        null_fit = glm.fit_null(
            y, o["family"], self._region.populations, adj.Z, adj.C, J
        )
        return tbl, null_fit

    def scan(self, null_fit=None):
        """Scan every window against the null fit.

        Returns
        -------
        fmscan.scan.ScanResult
        """
        if null_fit is None:
            _, null_fit = self.null()
        o = self._opts
        windows = self._region.windows(o["max_fraction"], o["max_fraction_by"])
        return scan.run_scan(
            self._region.cases, windows, null_fit, o["family"], o["sides"]
        )

    def _theta(self, adj, null_fit):
        if adj.bss is not None:
            a, b = adj.bss.domain
            return glm.parameter_function(
                null_fit, adj.design, adj.bss, np.linspace(a, b, 201)
            )
        if adj.grid is not None:
            J = null_fit.J
            vals = adj.design.V[:, :J] @ null_fit.theta
            return pd.DataFrame({"t": adj.grid, "theta": vals})
        return None

    def run(self):
        """Run the whole pipeline.

        Returns
        -------
        Analysis
        """
        o = self._opts
        _logger.info(f"running mode '{o['mode']}', family '{o['family']}'")
        adj = self.adjustment()
        tbl, null_fit = self.null(adj)
        res = self.scan(null_fit)
        res = scan.monte_carlo_pvalues(
            res,
            null_fit,
            M=o["M"],
            seed=o["seed"],
            populations=self._region.populations,
            Z=adj.Z,
            C=adj.C,
            refit=o["refit"],
            n_jobs=o["n_jobs"],
        )
        level = o["secondary_level"] or o["level"]
        res = scan.secondary_clusters(res, level)
        theta = self._theta(adj, null_fit)
        return Analysis(adj, tbl, null_fit, res, theta, o["level"])

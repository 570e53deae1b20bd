import logging
from pathlib import Path

import numpy as np
import pandas as pd

from fmscan import geo, report
from fmscan._pipe import _DEFAULTS as _PIPE_DEFAULTS
from fmscan._pipe import _Pipe
from fmscan.errors import FmscanError, IngestionError, InputError
from fmscan.fda import read_series
from fmscan.set_up import RunConfig

_logger = logging.getLogger(__name__)

_MODES = ("none", "univariate", "multivariate", "functional")
_COMPARISON_COLS = [
    "model",
    "cluster_rank",
    "n_members",
    "relative_risk",
    "llr",
    "p_value",
    "center_id",
    "member_ids",
]


class StudyRegion:
    """
    The study region: locations with outcomes, at-risk populations, scalar
    covariates and longitudinal series, all aligned on one location order.

    Usually made by :func:`ingest` or :func:`fmscan.testing.make_test_region`.

    Parameters
    ----------
    ids : sequence of str
        Unique location ids.
    coords : array_like
        ``n x 2`` planar coordinates.
    cases : array_like
        Outcome per location.
    populations : array_like, optional
        At-risk populations, required for Poisson.
    covariates : pandas.DataFrame, optional
        ``n x p`` scalar covariates in location order.
    series : sequence of LongitudinalSeries, optional
        One series per location, in location order.

    Examples
    --------
    >>> import numpy as np
    >>> from fmscan.region import StudyRegion
    >>> r = StudyRegion(["a", "b", "c"], np.array([[0, 0], [1, 0], [3, 0]]),
    ...                 [1, 2, 3], [10, 10, 10])
    >>> r
    StudyRegion(n=3, p=0, series=False)
    >>> [w.members for w in r.windows(0.5)]
    [(0,), (1,), (2,)]
    """

    def __init__(
        self, ids, coords, cases, populations=None, covariates=None, series=None
    ):
        self.ids = tuple(str(_) for _ in ids)
        n = len(self.ids)
        if len(set(self.ids)) != n:
            dup = sorted({i for i in self.ids if self.ids.count(i) > 1})
            raise IngestionError(f"duplicate location ids {dup}", {"ids": dup})
        self.coords = np.asarray(coords, dtype=float).reshape(n, 2)
        self.cases = np.asarray(cases, dtype=float)
        self.populations = (
            None if populations is None else np.asarray(populations, dtype=float)
        )
        self.covariates = covariates
        self.series = None if series is None else tuple(series)
        for nme, arr in (("cases", self.cases), ("populations", self.populations)):
            if arr is not None and arr.shape != (n,):
                raise InputError(f"{nme} must have length {n}, got {arr.shape}")
        if covariates is not None and len(covariates) != n:
            raise InputError(f"covariates must have {n} rows, got {len(covariates)}")
        if self.series is not None:
            bad = [(s.id, i) for s, i in zip(self.series, self.ids) if s.id != i]
            if len(self.series) != n or bad:
                raise InputError("series must follow the location order")
        self._dist = None

    def __repr__(self):
        return (
            f"StudyRegion(n={self.n}, p={self.p}, series={self.series is not None})"
        )

    @property
    def n(self):
        return len(self.ids)

    @property
    def p(self):
        return 0 if self.covariates is None else self.covariates.shape[1]

    @property
    def Z(self):
        """Scalar covariates as an ``n x p`` array, None without covariates."""
        if self.covariates is None or not self.p:
            return None
        return np.asarray(self.covariates, dtype=float)

    @property
    def m(self):
        """Observations per location, None without series."""
        if self.series is None:
            return None
        return pd.Series([s.m for s in self.series], index=self.ids, name="m")

    def locations(self):
        return [geo.Location(i, x, y) for i, (x, y) in zip(self.ids, self.coords)]

    def distances(self):
        """Distance matrix, computed once."""
        if self._dist is None:
            self._dist = geo.distance_matrix(self.coords)
        return self._dist

    def windows(self, max_fraction=0.5, by="count"):
        """Circular windows, see :func:`fmscan.geo.enumerate_windows`."""
        return geo.enumerate_windows(
            self.distances(), max_fraction, self.populations, by
        )

    def pipe(self, **kwargs):
        """Make a :class:`pipeline object <fmscan._pipe._Pipe>`.

        Args
        ----
        **kwargs :
            Settings of the :class:`fmscan._pipe._Pipe`.

        Returns
        -------
        fmscan._pipe._Pipe
        """
        return _Pipe(self, **kwargs)

    def write(self, out_dir, prefix=""):
        """Write the region as the CSV inputs :func:`ingest` reads.

        Returns
        -------
        dict
            Paths keyed ``locations``, ``counts``, ``covariates``, ``series``.
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        res = {
            "locations": out / f"{prefix}locations.csv",
            "counts": out / f"{prefix}counts.csv",
        }
        pd.DataFrame(
            {"id": self.ids, "x": self.coords[:, 0], "y": self.coords[:, 1]}
        ).to_csv(res["locations"], index=False)
        counts = pd.DataFrame({"id": self.ids, "cases": self.cases})
        if self.populations is not None:
            counts["population"] = self.populations
        counts.to_csv(res["counts"], index=False)
        if self.p:
            res["covariates"] = out / f"{prefix}covariates.csv"
            cov = pd.DataFrame(self.Z, columns=list(self.covariates.columns))
            cov.insert(0, "id", self.ids)
            cov.to_csv(res["covariates"], index=False)
        if self.series is not None:
            res["series"] = out / f"{prefix}series.csv"
            pd.concat(
                [
                    pd.DataFrame({"id": s.id, "t": s.t, "value": s.value})
                    for s in self.series
                ]
            ).to_csv(res["series"], index=False)
        _logger.info(f"wrote region tables {sorted(res)} to {out}")
        return {k: str(v) for k, v in res.items()}


def _read_table(pth, cols):
    df = pd.read_csv(pth, dtype={"id": str}, encoding="utf-8")
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise IngestionError(f"{pth}: missing columns {missing}", {"columns": missing})
    dup = sorted(df.loc[df.id.duplicated(), "id"].unique().tolist())
    if dup:
        raise IngestionError(f"{pth}: duplicate ids {dup}", {"ids": dup, "file": pth})
    return df.set_index("id")


def _check_ids(ids, found, pth):
    missing = [i for i in ids if i not in found]
    extra = sorted(set(found) - set(ids))
    if missing or extra:
        raise IngestionError(
            f"{pth}: ids missing {missing}, unknown {extra}",
            {"file": str(pth), "missing": missing, "unknown": extra},
        )


def _basis_dim(config):
    if config.basis == "bspline":
        return config.n_knots + config.degree - 1
    return config.n_basis


def ingest(config: RunConfig) -> StudyRegion:
    """Read and join the input tables of a run on location id.

    Formats, UTF-8 CSV with a header row:

    * locations ``id,x,y``
    * counts ``id,cases,population``; ``population`` is optional outside
      Poisson
    * covariates ``id,z1,...,zp``, optional
    * series ``id,t,value``, long format, optional in mode ``none``

    Every table must hold exactly the location ids, once each.

    Parameters
    ----------
    config : fmscan.set_up.RunConfig

    Returns
    -------
    StudyRegion
    """
    config.check_paths()
    locs = geo.read_locations(config.locations)
    ids = [loc.id for loc in locs]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise IngestionError(f"{config.locations}: duplicate ids {dup}", {"ids": dup})
    coords = np.array([[loc.x, loc.y] for loc in locs])

    cols = ["cases", "population"] if config.family == "poisson" else ["cases"]
    counts = _read_table(config.counts, cols)
    _check_ids(ids, counts.index, config.counts)
    counts = counts.loc[ids]
    pop = counts["population"].to_numpy(float) if "population" in counts else None
    if pop is not None and np.any(~(pop > 0)):
        bad = counts.index[~(pop > 0)].tolist()
        raise IngestionError(f"non-positive populations for ids {bad}", {"ids": bad})

    cov = None
    if config.covariates:
        cov = _read_table(config.covariates, [])
        _check_ids(ids, cov.index, config.covariates)
        cov = cov.loc[ids].astype(float)

    series = None
    if config.series:
        by_id = read_series(config.series)
        _check_ids(ids, by_id.keys(), config.series)
        series = [by_id[i] for i in ids]
        m = np.array([s.m for s in series])
        _logger.info(f"series per location: m_i from {m.min()} to {m.max()}")
        if config.mode == "functional":
            k = _basis_dim(config)
            short = [i for i, mi in zip(ids, m) if mi < k]
            if short:
                raise IngestionError(
                    f"locations {short} have fewer than K={k} observations",
                    {"ids": short, "K": k},
                )
    region = StudyRegion(ids, coords, counts["cases"].to_numpy(float), pop, cov, series)
    _logger.info(f"ingested {region}")
    return region


def _error_doc(ex):
    if isinstance(ex, FmscanError):
        return ex.to_dict()
    return {"error": type(ex).__name__, "message": str(ex), "detail": {}}


def _pipe_opts(config):
    return {k: v for k, v in config.to_dict().items() if k in _PIPE_DEFAULTS}


def run_pipeline(config: RunConfig):
    """Run the full scan for the configured adjustment mode and write reports.

    Writes ``clusters.csv``, ``clusters.geojson``, ``lambda.csv``,
    ``theta.csv`` (series modes), ``truncation.csv`` and ``manifest.json``
    into ``config.out_dir``. The manifest is written even when the run fails.

    Returns
    -------
    fmscan._pipe.Analysis
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    try:
        region = ingest(config)
        analysis = region.pipe(**_pipe_opts(config)).run()
        files = report.write_analysis(analysis, region, out)
    except Exception as ex:
        report.write_manifest(
            out / "manifest.json", config.to_dict(), files, "error", _error_doc(ex)
        )
        raise
    res = analysis.result
    report.write_manifest(
        out / "manifest.json",
        config.to_dict(),
        files,
        extra={"lambda": res.lam, "p_value": res.p_value, "J": analysis.null_fit.J},
    )
    return analysis


def compare_models(config: RunConfig, modes=_MODES):
    """Run every adjustment mode on the same data and seed.

    Each mode writes its reports into ``<out_dir>/<mode>``; the combined
    ``comparison.csv`` has one row per reported cluster of each mode. A mode
    that fails is recorded and the others still run.

    Returns
    -------
    (pandas.DataFrame, dict)
        The combined table, and the error of each failed mode.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    failures, frames, files = {}, [], []
    try:
        region = ingest(config)
        opts = _pipe_opts(config)
        for mode in modes:
            try:
                analysis = region.pipe(**opts).adjust(mode).run()
            except FmscanError as ex:
                _logger.warning(f"mode '{mode}' failed: {ex}")
                failures[mode] = ex.to_dict()
                continue
            files += report.write_analysis(analysis, region, out / mode)
            tbl = report.cluster_table(analysis.result, region.ids)
            tbl.insert(0, "model", mode)
            frames.append(tbl)
    except Exception as ex:
        report.write_manifest(
            out / "manifest.json", config.to_dict(), files, "error", _error_doc(ex)
        )
        raise
    cols = ["model"] + report.CLUSTER_COLS
    res = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=cols)
    res = res[_COMPARISON_COLS]
    res.to_csv(out / "comparison.csv", index=False)
    report.write_manifest(
        out / "manifest.json",
        config.to_dict(),
        [out / "comparison.csv"],
        "ok" if not failures else "partial",
        extra={"modes": list(modes), "failures": failures},
    )
    _logger.info(f"compared {len(modes)} modes, {len(failures)} failed")
    return res, failures

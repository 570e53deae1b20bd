"""Simulation harness: Poisson outcomes over a 94-location geometry with a
planted true cluster and a fake cluster produced by a functional confounder.

Each location carries a curve ``X_i(t) = U_i h(t) + (1 - U_i) h(t + 4)``
outside the fake cluster and ``U_i h(t) + (1 - U_i) h(t - 4)`` inside, with
the tent ``h(t) = max(6 - |t - 11|, 0)``, observed with Gaussian noise. Counts
are Poisson with mean ``N_i exp(alpha + delta xi_i + int X_i(t) theta(t) dt)``.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from scipy import optimize

from fmscan import geo
from fmscan.errors import ConfigError, FmscanError, InputError
from fmscan.fda import LongitudinalSeries, _gauss_legendre
from fmscan.region import StudyRegion

_logger = logging.getLogger(__name__)

_GEOMETRY_PTH = Path(__file__).parent / "data" / "locations94.csv"
_SHIFT = 4.0
_TARGETS = ("true", "fake")


def tent(t):
    """``h(t) = max(6 - |t - 11|, 0)``.

    Examples
    --------
    >>> from fmscan.sim import tent
    >>> tent(11), tent(8), tent(4)
    (6.0, 3.0, 0.0)
    """
    res = np.maximum(6 - np.abs(np.asarray(t, dtype=float) - 11), 0.0)
    return float(res) if np.ndim(t) == 0 else res


def theta_true(t):
    """``theta(t) = (t / 9) sin(pi t / 9 + pi)``, before scaling."""
    t = np.asarray(t, dtype=float)
    res = t / 9 * np.sin(np.pi * t / 9 + np.pi)
    return float(res) if res.ndim == 0 else res


def _tent_integral(shift, domain):
    """``int h(t + shift) theta(t) dt`` over ``domain``, exact up to rounding."""
    a, b = domain
    kinks = [11 - 6 - shift, 11 - shift, 11 + 6 - shift]
    breaks = np.unique(np.clip([a, b] + kinks, a, b))
    nodes, weights = _gauss_legendre(breaks, 30)
    return float(np.sum(weights * tent(nodes + shift) * theta_true(nodes)))


def _log_mean_exp_uniform(b):
    """``log E exp(b U)`` for ``U ~ Uniform(0, 1)``."""
    if abs(b) < 1e-12:
        return b / 2
    if b > 0:
        return b + np.log(-np.expm1(-b)) - np.log(b)
    return np.log(-np.expm1(b)) - np.log(-b)


def calibrate_theta_scale(ratio=2.0, domain=(0.0, 21.0)):
    """Scale ``kappa`` of ``theta`` giving the fake cluster ``ratio`` times the
    mean outcome of the rest of the region.

    The expectation runs over ``U``; the log mean of
    ``exp(kappa (U A0 + (1 - U) A))`` is
    ``kappa A + log E exp(kappa (A0 - A) U)`` with ``A0 = int h theta`` and
    ``A`` the integral of the shifted tent.

    Returns
    -------
    float
    """
    if ratio <= 0:
        raise ConfigError(f"Invalid fake_ratio {ratio}, must be positive")
    a0 = _tent_integral(0.0, domain)
    a_out = _tent_integral(_SHIFT, domain)
    a_in = _tent_integral(-_SHIFT, domain)

    def f(k):
        lm_in = k * a_in + _log_mean_exp_uniform(k * (a0 - a_in))
        lm_out = k * a_out + _log_mean_exp_uniform(k * (a0 - a_out))
        return lm_in - lm_out - np.log(ratio)

    if ratio == 1:
        return 0.0
    step = np.sign(a_in - a_out) * (1.0 if ratio > 1 else -1.0) * 1e-3
    hi = step
    while np.sign(f(hi)) == np.sign(f(0.0)):
        hi *= 2
        if abs(hi) > 1e3:
            raise ConfigError(f"cannot reach fake_ratio {ratio}")
    kappa = optimize.brentq(f, min(0.0, hi), max(0.0, hi), xtol=1e-14)
    _logger.info(
        f"theta scale {kappa:.6g}: integrals h={a0:.4f}, "
        f"h(t+4)={a_out:.4f}, h(t-4)={a_in:.4f}"
    )
    return float(kappa)


def load_geometry(pth=None):
    """Locations and populations, ``id,x,y,population``.

    Defaults to the bundled 94-location geometry.
    """
    pth = _GEOMETRY_PTH if pth is None else pth
    df = pd.read_csv(pth, dtype={"id": str})
    missing = [c for c in ("id", "x", "y", "population") if c not in df.columns]
    if missing:
        raise InputError(f"{pth}: missing columns {missing}", {"columns": missing})
    return df


def nearest(geometry, center_id, size):
    """Indices of the ``size`` locations nearest to ``center_id``, itself included."""
    ids = geometry["id"].tolist()
    if center_id not in ids:
        raise ConfigError(f"unknown cluster center '{center_id}'")
    d = geo.distance_matrix(geometry[["x", "y"]].to_numpy(float))
    order = np.argsort(d[ids.index(center_id)], kind="stable")
    return tuple(sorted(order[:size].tolist()))


@dataclass(frozen=True)
class SimulationConfig:
    """Settings of the simulation study.

    Attributes
    ----------
    relative_risks : tuple of float
        Intensities ``exp(delta)`` of the true cluster.
    n_replicates : int
        Datasets per intensity.
    M : int
        Monte Carlo replicates per dataset.
    level : float
    n_times : int
        Equally spaced observation times over ``domain``.
    domain : (float, float)
    noise : float
        Standard deviation of the measurement noise.
    alpha : float
        Intercept, ``-11.51`` gives an incidence near ``1e-5``.
    fake_ratio : float
        Mean outcome inside the fake cluster relative to outside.
    theta_scale : float, optional
        Multiplier of ``theta``; calibrated from ``fake_ratio`` when None.
    true_center, fake_center : str
        Location ids the two clusters are built around.
    cluster_size : int
    modes : tuple of str
        Adjustment modes compared.
    """

    relative_risks: Tuple[float, ...] = (1.0, 1.2, 1.4, 1.6, 1.8, 2.0)
    n_replicates: int = 200
    M: int = 99
    level: float = 0.05
    n_times: int = 70
    domain: Tuple[float, float] = (0.0, 21.0)
    noise: float = 0.25
    alpha: float = -11.51
    fake_ratio: float = 2.0
    theta_scale: Optional[float] = None
    true_center: str = "D21"
    fake_center: str = "D75"
    cluster_size: int = 8
    modes: Tuple[str, ...] = ("univariate", "multivariate", "functional")
    seed: int = 0
    degree: int = 3
    n_knots: int = 13
    inertia_cap: float = 0.95
    max_fraction: float = 0.5
    refit: bool = True
    n_jobs: int = 1
    geometry: Optional[str] = None

    def __post_init__(self):
        if not self.relative_risks or any(r <= 0 for r in self.relative_risks):
            raise ConfigError(f"Invalid relative_risks {self.relative_risks}")
        if not 0 < self.level < 1:
            raise ConfigError(f"Invalid level {self.level}, must be in (0, 1)")
        if self.n_replicates < 1 or self.M < 1 or self.n_jobs < 1:
            raise ConfigError("n_replicates, M and n_jobs must be at least 1")
        if self.n_times < 2 or self.noise < 0 or self.cluster_size < 1:
            raise ConfigError("need n_times >= 2, noise >= 0 and cluster_size >= 1")
        bad = set(self.modes) - {"none", "univariate", "multivariate", "functional"}
        if bad or not self.modes:
            raise ConfigError(f"Invalid modes {self.modes}")

    @classmethod
    def full_scale(cls, **kwargs):
        """1000 datasets per intensity and 999 Monte Carlo replicates."""
        return cls(**{"n_replicates": 1000, "M": 999, **kwargs})


@dataclass(frozen=True, eq=False)
class SimDataset:
    """One simulated dataset and the truth behind it."""

    region: StudyRegion
    mu: np.ndarray
    true_members: Tuple[int, ...]
    fake_members: Tuple[int, ...]
    u: np.ndarray


def cluster_members(config, geometry=None):
    """Member indices of the true and the fake cluster, checked disjoint."""
    geometry = load_geometry(config.geometry) if geometry is None else geometry
    true = nearest(geometry, config.true_center, config.cluster_size)
    fake = nearest(geometry, config.fake_center, config.cluster_size)
    if set(true) & set(fake):
        raise ConfigError(
            f"true and fake clusters overlap on {sorted(set(true) & set(fake))}"
        )
    return true, fake


def generate_dataset(config, exp_delta, rng, geometry=None, kappa=None):
    """Draw one dataset.

    Parameters
    ----------
    config : SimulationConfig
    exp_delta : float
        Relative risk of the true cluster.
    rng : numpy.random.Generator
    geometry : pandas.DataFrame, optional
        From :func:`load_geometry`.
    kappa : float, optional
        Scale of ``theta``; defaults to ``config.theta_scale``, else
        :func:`calibrate_theta_scale`.

    Returns
    -------
    SimDataset
    """
    geometry = load_geometry(config.geometry) if geometry is None else geometry
    if kappa is None:
        kappa = config.theta_scale
    if kappa is None:
        kappa = calibrate_theta_scale(config.fake_ratio, config.domain)
    true, fake = cluster_members(config, geometry)
    n = len(geometry)
    t = np.linspace(*config.domain, config.n_times)
    in_fake = np.zeros(n, dtype=bool)
    in_fake[list(fake)] = True
    xi = np.zeros(n)
    xi[list(true)] = 1.0

    u = rng.uniform(size=n)
    shift = np.where(in_fake, -_SHIFT, _SHIFT)
    curves = u[:, None] * tent(t)[None, :] + (1 - u)[:, None] * tent(
        t[None, :] + shift[:, None]
    )
    obs = curves + rng.normal(0.0, config.noise, size=curves.shape)
    a0 = _tent_integral(0.0, config.domain)
    a_s = {s: _tent_integral(s, config.domain) for s in (-_SHIFT, _SHIFT)}
    effect = kappa * (u * a0 + (1 - u) * np.array([a_s[s] for s in shift]))

    pop = geometry["population"].to_numpy(float)
    mu = pop * np.exp(config.alpha + np.log(exp_delta) * xi + effect)
    y = rng.poisson(mu).astype(float)
    ids = geometry["id"].tolist()
    series = [LongitudinalSeries(i, t, v) for i, v in zip(ids, obs)]
    coords = geometry[["x", "y"]].to_numpy(float)
    region = StudyRegion(ids, coords, y, pop, None, series)
    return SimDataset(region, mu, true, fake, u)


def _overlap(members, target, n):
    members, target = set(members), set(target)
    tp = len(members & target) / len(target)
    fp = len(members - target) / (n - len(target))
    return tp, fp


def _study_job(args):
    """Analyse one dataset under every mode; one row per mode and target."""
    config, i_rr, r, kappa, geometry = args
    exp_delta = config.relative_risks[i_rr]
    rng = np.random.default_rng(
        np.random.SeedSequence(config.seed, spawn_key=(i_rr, r))
    )
    mc_ss = np.random.SeedSequence(config.seed, spawn_key=(i_rr, r, 1))
    mc_seed = int(mc_ss.generate_state(1)[0])
    data = generate_dataset(config, exp_delta, rng, geometry, kappa)
    region = data.region
    pipe = region.pipe(
        family="poisson",
        basis="bspline",
        degree=config.degree,
        n_knots=config.n_knots,
        domain=config.domain,
        inertia_cap=config.inertia_cap,
        max_fraction=config.max_fraction,
        M=config.M,
        seed=mc_seed,
        refit=config.refit,
        n_jobs=1,
        level=config.level,
    )
    targets = {"true": data.true_members, "fake": data.fake_members}
    rows = []
    for mode in config.modes:
        base = dict(exp_delta=exp_delta, replicate=r, mode=mode)
        try:
            res = pipe.adjust(mode).run()
        except FmscanError as ex:
            _logger.warning(f"RR={exp_delta}, replicate {r}, mode {mode}: {ex}")
            for target in _TARGETS:
                rows.append(dict(base, target=target, error=str(ex)))
            continue
        win = res.result.mlc_window
        sig = bool(res.significant)
        for target in _TARGETS:
            tp, fp = _overlap(win.members, targets[target], region.n)
            rows.append(
                dict(
                    base,
                    target=target,
                    lam=res.result.lam,
                    p_value=res.result.p_value,
                    significant=sig,
                    J=res.null_fit.J,
                    n_members=len(win),
                    mlc_ids=";".join(region.ids[i] for i in win.members),
                    hit=sig and tp > 0,
                    tp=tp,
                    fp=fp,
                    error=None,
                )
            )
    return rows


_DETAIL_COLS = [
    "exp_delta", "replicate", "mode", "target", "lam", "p_value", "significant",
    "J", "n_members", "mlc_ids", "hit", "tp", "fp", "error",
]


def _summarise(detail):
    ok = detail.loc[detail.error.isna()].copy()
    ok["hit"] = ok["hit"].astype(float)
    sig = ok["significant"].astype(float)
    ok["tp_zero"] = ok["tp"] * sig
    ok["fp_zero"] = ok["fp"] * sig
    ok["tp_sig"] = ok["tp"].where(sig > 0)
    ok["fp_sig"] = ok["fp"].where(sig > 0)
    keys = ["mode", "exp_delta", "target"]
    res = (
        ok.groupby(keys, sort=False)
        .agg(
            power=("hit", "mean"),
            tp=("tp", "mean"),
            fp=("fp", "mean"),
            tp_zero=("tp_zero", "mean"),
            fp_zero=("fp_zero", "mean"),
            tp_sig=("tp_sig", "mean"),
            fp_sig=("fp_sig", "mean"),
            n=("hit", "size"),
        )
        .reset_index()
    )
    failed = detail.loc[detail.error.notna()].groupby(keys, sort=False).size()
    res["n_failed"] = [
        int(failed.get(tuple(k), 0)) for k in res[keys].itertuples(index=False)
    ]
    return res.sort_values(keys, kind="stable").reset_index(drop=True)


@dataclass(frozen=True, eq=False)
class SimMetrics:
    """Power, true-positive and false-positive rates of a study.

    Attributes
    ----------
    power_curves : pandas.DataFrame
        One row per mode, intensity and target (``true`` or ``fake``):
        ``power`` is the share of datasets whose most likely cluster is
        significant and meets the target; ``tp``/``fp`` average the location
        overlap rates over all datasets, ``tp_zero``/``fp_zero`` count
        non-significant datasets as 0, ``tp_sig``/``fp_sig`` average over
        significant datasets only.
    detail : pandas.DataFrame
        One row per dataset, mode and target.
    theta_scale : float
    """

    power_curves: pd.DataFrame
    detail: pd.DataFrame
    theta_scale: float
    n_failed: int = field(default=0)

    def power(self, mode, exp_delta, target="true"):
        df = self.power_curves
        row = df.loc[
            (df["mode"] == mode)
            & np.isclose(df["exp_delta"], exp_delta)
            & (df["target"] == target)
        ]
        if row.empty:
            raise KeyError((mode, exp_delta, target))
        return float(row["power"].iloc[0])

    def write(self, out_dir):
        """Write ``power_curves.csv`` and ``replicates.csv``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.power_curves.to_csv(out / "power_curves.csv", index=False)
        self.detail.to_csv(out / "replicates.csv", index=False)
        _logger.info(f"wrote power curves and replicate detail to {out}")
        return [out / "power_curves.csv", out / "replicates.csv"]


def run_study(config=None, out_dir=None):
    """Run the simulation study.

    Every dataset draws from ``SeedSequence(seed, spawn_key=(i, r))`` for
    intensity ``i`` and replicate ``r``, so results do not depend on
    ``n_jobs``.

    Parameters
    ----------
    config : SimulationConfig, optional
    out_dir : str, optional
        Where to write ``power_curves.csv`` and ``replicates.csv``.

    Returns
    -------
    SimMetrics
    """
    config = SimulationConfig() if config is None else config
    geometry = load_geometry(config.geometry)
    cluster_members(config, geometry)
    kappa = config.theta_scale
    if kappa is None:
        kappa = calibrate_theta_scale(config.fake_ratio, config.domain)
    jobs = [
        (config, i, r, kappa, geometry)
        for i in range(len(config.relative_risks))
        for r in range(config.n_replicates)
    ]
    _logger.info(
        f"simulation: {len(jobs)} datasets, modes {list(config.modes)}, M={config.M}"
    )
    if config.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=config.n_jobs) as ex:
            out = list(ex.map(_study_job, jobs, chunksize=4))
    else:
        out = []
        for k, job in enumerate(jobs, 1):
            out.append(_study_job(job))
            if k % 50 == 0:
                _logger.info(f"simulated {k}/{len(jobs)} datasets")
    detail = pd.DataFrame([row for rows in out for row in rows], columns=_DETAIL_COLS)
    n_failed = int(detail.error.notna().sum() // len(_TARGETS))
    if n_failed:
        _logger.warning(f"{n_failed} dataset analyses failed")
    res = SimMetrics(_summarise(detail), detail, kappa, n_failed)
    if out_dir is not None:
        res.write(out_dir)
    return res


def write_fixture(config, out_dir, exp_delta=2.0, replicate=0):
    """Write one simulated dataset as CSV inputs of :func:`fmscan.region.ingest`.

    Returns
    -------
    dict
        Paths keyed by table.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence(config.seed, spawn_key=(replicate,))
    )
    data = generate_dataset(config, exp_delta, rng)
    return data.region.write(out_dir)


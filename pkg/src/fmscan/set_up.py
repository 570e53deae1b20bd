import json
import logging
import os
from configparser import ConfigParser
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Tuple

from fmscan.errors import ConfigError

_logger = logging.getLogger(__name__)
_CONFIG_PTH = Path.home() / ".fmscan"
_SECTION = "run"

_MODES = ("none", "univariate", "multivariate", "functional")


@dataclass(frozen=True)
class RunConfig:
    """Settings of one scan run.

    Construct via :func:`load_config` to pick up user defaults. Every field can
    be given in a JSON config document and on the command line under the same
    name.

    Attributes
    ----------
    locations, counts, covariates, series : str
        Input CSV paths, see :func:`fmscan.region.ingest`. ``covariates`` and
        ``series`` are optional.
    basis : str
        ``bspline`` or ``fourier``.
    degree : int
        B-spline degree.
    n_knots : int
        Equally spaced B-spline knots including both boundaries,
        ``K = n_knots + degree - 1``.
    n_basis : int
        Fourier dimension ``K``.
    fourier_period : float, optional
        Defaults to the domain length.
    domain : (float, float), optional
        Interval ``T``; defaults to the range of observed times.
    inertia_cap : float
        Cumulative inertia cap of the truncation candidates, in ``(0, 1]``.
    max_fraction : float
        Window size cap, in ``(0, 0.5]``.
    max_fraction_by : str
        ``count`` or ``population``.
    family : str
        ``poisson``, ``bernoulli`` or ``gaussian``.
    M : int
        Monte Carlo replicates.
    level : float
        Significance level of the most likely cluster.
    secondary_level : float, optional
        Significance level of secondary clusters, defaults to ``level``.
    seed : int
    mode : str
        Covariate adjustment: ``none``, ``univariate``, ``multivariate`` or
        ``functional``.
    summary : str
        ``mean`` or ``median`` of each series in univariate mode.
    sides : str
        ``two-sided``, ``high`` or ``low``.
    refit : bool
        Monte Carlo replicates refit the null model; ``False`` keeps the
        covariate effects fixed.
    n_jobs : int
        Monte Carlo worker processes.
    out_dir : str
        Output directory.
    """

    locations: Optional[str] = None
    counts: Optional[str] = None
    covariates: Optional[str] = None
    series: Optional[str] = None
    basis: str = "bspline"
    degree: int = 3
    n_knots: int = 13
    n_basis: int = 5
    fourier_period: Optional[float] = None
    domain: Optional[Tuple[float, float]] = None
    inertia_cap: float = 0.95
    max_fraction: float = 0.5
    max_fraction_by: str = "count"
    family: str = "poisson"
    M: int = 999
    level: float = 0.05
    secondary_level: Optional[float] = None
    seed: int = 0
    mode: str = "functional"
    summary: str = "mean"
    sides: str = "two-sided"
    refit: bool = True
    n_jobs: int = 1
    out_dir: str = "fmscan_out"

    def __post_init__(self):
        _check_choice("basis", self.basis, ("bspline", "fourier"))
        _check_choice("max_fraction_by", self.max_fraction_by, ("count", "population"))
        _check_choice("family", self.family, ("poisson", "bernoulli", "gaussian"))
        _check_choice("mode", self.mode, _MODES)
        _check_choice("summary", self.summary, ("mean", "median"))
        _check_choice("sides", self.sides, ("two-sided", "high", "low"))
        _check_range("inertia_cap", self.inertia_cap, 0, 1, closed_hi=True)
        _check_range("max_fraction", self.max_fraction, 0, 0.5, closed_hi=True)
        _check_range("level", self.level, 0, 1)
        if self.secondary_level is not None:
            _check_range("secondary_level", self.secondary_level, 0, 1)
        for nme, lo in (
            ("M", 1),
            ("n_jobs", 1),
            ("degree", 0),
            ("n_knots", 2),
            ("n_basis", 1),
        ):
            if getattr(self, nme) < lo:
                raise ConfigError(
                    f"Invalid {nme} {getattr(self, nme)}, need at least {lo}",
                    {nme: getattr(self, nme)},
                )
        if self.domain is not None:
            a, b = self.domain
            if not b > a:
                raise ConfigError(f"Invalid domain {self.domain}, need a < b")

    def to_dict(self):
        """Plain dict of all settings, JSON serialisable."""
        res = asdict(self)
        if res["domain"] is not None:
            res["domain"] = list(res["domain"])
        return res

    def check_paths(self):
        """Raise ``ConfigError`` for input files that do not exist."""
        need = ["locations", "counts"]
        if self.mode != "none" or self.series:
            need.append("series")
        missing = [k for k in need if getattr(self, k) is None]
        if missing:
            raise ConfigError(f"no path given for {missing}", {"keys": missing})
        bad = {
            k: getattr(self, k)
            for k in ("locations", "counts", "covariates", "series")
            if getattr(self, k) is not None and not Path(getattr(self, k)).is_file()
        }
        if bad:
            raise ConfigError(f"input files not found: {bad}", {"paths": bad})


def _check_choice(nme, val, choices):
    if val not in choices:
        opts = ", ".join(f"'{c}'" for c in choices)
        raise ConfigError(f"Invalid {nme} '{val}', one of {opts}", {nme: val})


def _check_range(nme, val, lo, hi, closed_hi=False):
    ok = lo < val <= hi if closed_hi else lo < val < hi
    if not ok:
        rng = f"({lo}, {hi}]" if closed_hi else f"({lo}, {hi})"
        raise ConfigError(f"Invalid {nme} {val}, must be in {rng}", {nme: val})


def _to_bool(raw):
    if isinstance(raw, bool):
        return raw
    s = str(raw).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    elif s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"Invalid boolean '{raw}'")


def _to_domain(raw):
    if raw is None:
        return None
    if isinstance(raw, str):
        raw = raw.replace("(", "").replace(")", "").split(",")
    a, b = (float(_) for _ in raw)
    return a, b


def _optional(f):
    def g(raw):
        if raw is None or str(raw).strip().lower() in ("", "none"):
            return None
        return f(raw)

    return g


_CONVERTERS = {
    "degree": int,
    "n_knots": int,
    "n_basis": int,
    "fourier_period": _optional(float),
    "domain": _optional(_to_domain),
    "inertia_cap": float,
    "max_fraction": float,
    "M": int,
    "level": float,
    "secondary_level": _optional(float),
    "seed": int,
    "refit": _to_bool,
    "n_jobs": int,
}

_KEYS = tuple(f.name for f in fields(RunConfig))


def _coerce(key, raw):
    if key not in _KEYS:
        raise ConfigError(f"Unknown config key '{key}'", {"key": key})
    conv = _CONVERTERS.get(key, _optional(str))
    try:
        return conv(raw)
    except (TypeError, ValueError) as ex:
        if isinstance(ex, ConfigError):
            raise
        raise ConfigError(f"Invalid value {raw!r} for '{key}'", {key: raw}) from ex


def save_default(key: str, value=None):
    """Save or delete a user default in the config file ``~/.fmscan``.

    Parameters
    ----------
    key : str
        A :class:`RunConfig` field name.
    value :
        New default, None to delete.

    Returns
    -------
    str
        Message anouncing completion.

    Notes
    -----
    Defaults are resolved per key, later sources winning:

    * hard-coded :class:`RunConfig` defaults,
    * the ``[run]`` section of the config file ``.fmscan`` in the system
      ``HOME`` directory,
    * environment variables ``fmscan_<key>``, for example ``fmscan_M=99``,
    * the JSON document given to :func:`load_config`,
    * explicit keyword overrides (command line flags).

    Examples
    --------
    >>> import fmscan
    >>> fmscan.save_default("M", 99)  # doctest: +SKIP
    'Saved M default to config'
    >>> fmscan.save_default("M")  # doctest: +SKIP
    'Deleted M default from config'
    """
    if value is not None:
        _coerce(key, value)
    elif key not in _KEYS:
        raise ConfigError(f"Unknown config key '{key}'", {"key": key})
    cfg = ConfigParser()
    cfg.optionxform = str
    cfg.read(_CONFIG_PTH)
    if not cfg.has_section(_SECTION):
        cfg.add_section(_SECTION)
    if value is None:
        cfg.remove_option(_SECTION, key)
    else:
        if isinstance(value, (list, tuple)):
            value = ",".join(str(_) for _ in value)
        cfg.set(_SECTION, key, str(value))
    with open(_CONFIG_PTH, "w") as f:
        cfg.write(f)
    if value is None:
        _logger.debug(f"{key} default deleted from config")
        return f"Deleted {key} default from config"
    else:
        _logger.debug(f"{key} default saved to config")
        return f"Saved {key} default to config"


def _user_defaults():
    """Defaults from the environment and the config file, environment first."""
    cfg = ConfigParser()
    cfg.optionxform = str
    cfg.read(_CONFIG_PTH)
    res = {}
    for key in _KEYS:
        raw = os.environ.get(f"fmscan_{key}")
        if raw is not None:
            _logger.debug(f"{key} default obtained from environ")
        elif cfg.has_option(_SECTION, key):
            raw = cfg.get(_SECTION, key)
            _logger.debug(f"{key} default obtained from config")
        if raw is not None:
            res[key] = _coerce(key, raw)
    return res


def _read_json(pth):
    try:
        with open(pth, encoding="utf-8") as f:
            res = json.load(f)
    except (OSError, json.JSONDecodeError) as ex:
        raise ConfigError(f"cannot read config document {pth}: {ex}") from ex
    if not isinstance(res, dict):
        raise ConfigError(f"config document {pth} must hold a JSON object")
    return res


def load_config(pth=None, **overrides) -> RunConfig:
    """Resolve a :class:`RunConfig` from every configuration layer.

    Parameters
    ----------
    pth : str, optional
        JSON document with :class:`RunConfig` keys.
    overrides :
        Highest precedence settings; None values are ignored.

    Returns
    -------
    RunConfig

    Examples
    --------
    >>> from fmscan.set_up import load_config
    >>> load_config(M=99, mode="none").M  # doctest: +SKIP
    99
    """
    res = _user_defaults()
    if pth is not None:
        doc = _read_json(pth)
        res.update({k: _coerce(k, v) for k, v in doc.items()})
        _logger.debug(f"read config document {pth}")
    res.update(
        {k: _coerce(k, v) for k, v in overrides.items() if v is not None}
    )
    return replace(RunConfig(), **res)

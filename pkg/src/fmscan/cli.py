"""Command line interface: ``fmscan scan|compare|simulate|windows|default``."""
import argparse
import json
import logging
import sys
from dataclasses import fields

import numpy as np
import pandas as pd

from fmscan import geo, region, sim
from fmscan.errors import ConfigError, FmscanError
from fmscan.set_up import RunConfig, load_config, save_default

_logger = logging.getLogger(__name__)

_LEVELS = (logging.WARNING, logging.INFO, logging.DEBUG)

_HELP = {
    "locations": "locations CSV, id,x,y",
    "counts": "counts CSV, id,cases[,population]",
    "covariates": "scalar covariates CSV, id,z1,...,zp",
    "series": "longitudinal series CSV, id,t,value",
    "domain": "interval of the basis, e.g. 0,21",
    "refit": "Monte Carlo replicates refit the null model, true or false",
}


def _add_run_flags(ap):
    """One flag per :class:`~fmscan.set_up.RunConfig` key, values coerced later."""
    ap.add_argument("--config", help="JSON document of run settings")
    for f in fields(RunConfig):
        names = [f"--{f.name}"]
        if "_" in f.name:
            names.append(f"--{f.name.replace('_', '-')}")
        ap.add_argument(*names, dest=f.name, default=None, help=_HELP.get(f.name))


def _run_config(args):
    keys = [f.name for f in fields(RunConfig)]
    return load_config(args.config, **{k: getattr(args, k) for k in keys})


def _floats(raw):
    try:
        return tuple(float(_) for _ in raw.split(","))
    except ValueError as ex:
        raise argparse.ArgumentTypeError(f"need comma separated numbers: {raw}") from ex


def _words(raw):
    return tuple(_.strip() for _ in raw.split(",") if _.strip())


def _positive_int(raw):
    try:
        res = int(raw)
    except ValueError as ex:
        raise argparse.ArgumentTypeError(f"need an integer, got '{raw}'") from ex
    if res < 1:
        raise argparse.ArgumentTypeError("value must be >= 1")
    return res


def _parser():
    ap = argparse.ArgumentParser(
        prog="fmscan",
        description="Spatial scan statistic adjusted for functional covariates",
    )
    ap.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v info, -vv debug"
    )
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("scan", help="scan for clusters with one adjustment mode")
    _add_run_flags(p)

    p = sub.add_parser("compare", help="scan under every adjustment mode")
    _add_run_flags(p)
    p.add_argument("--modes", type=_words, default=None, help="e.g. none,functional")

    p = sub.add_parser("simulate", help="power study on simulated data")
    p.add_argument("--relative-risks", "--relative_risks", type=_floats)
    p.add_argument("--n-replicates", "--n_replicates", type=_positive_int)
    p.add_argument("--M", type=_positive_int)
    p.add_argument("--level", type=float)
    p.add_argument("--modes", type=_words)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-jobs", "--n_jobs", type=_positive_int)
    p.add_argument("--fake-ratio", "--fake_ratio", type=float)
    p.add_argument("--theta-scale", "--theta_scale", type=float)
    p.add_argument("--geometry", help="locations CSV, id,x,y,population")
    p.add_argument(
        "--full-scale",
        action="store_true",
        help="1000 datasets per intensity and 999 Monte Carlo replicates",
    )
    p.add_argument("--out-dir", "--out_dir", default="fmscan_sim")
    p.add_argument(
        "--write-fixture",
        metavar="DIR",
        help="only write one simulated dataset as CSV inputs into DIR",
    )
    p.add_argument("--exp-delta", "--exp_delta", type=float, default=2.0)

    p = sub.add_parser("windows", help="list the circular scanning windows")
    p.add_argument("--locations", required=True)
    p.add_argument("--counts", help="counts CSV with population, for --by population")
    p.add_argument("--max-fraction", "--max_fraction", type=float, default=0.5)
    p.add_argument(
        "--max-fraction-by",
        "--max_fraction_by",
        choices=("count", "population"),
        default="count",
    )
    p.add_argument("--out", help="output CSV, standard output by default")

    p = sub.add_parser("default", help="save or delete a user default")
    p.add_argument("key")
    p.add_argument("value", nargs="?", help="omit to delete the default")
    return ap


def _scan(args):
    config = _run_config(args)
    analysis = region.run_pipeline(config)
    res = analysis.result
    summary = {
        "mode": analysis.mode,
        "lambda": res.lam,
        "p_value": res.p_value,
        "J": analysis.null_fit.J,
        "n_clusters": len(res.clusters),
        "out_dir": config.out_dir,
    }
    print(json.dumps(summary, indent=2, default=float))
    return 0


def _compare(args):
    config = _run_config(args)
    modes = args.modes or region._MODES
    tbl, failures = region.compare_models(config, modes)
    print(tbl.to_string(index=False))
    for mode, err in failures.items():
        print(json.dumps({"mode": mode, **err}), file=sys.stderr)
    return 1 if failures else 0


def _simulate(args):
    kw = dict(
        relative_risks=args.relative_risks,
        n_replicates=args.n_replicates,
        M=args.M,
        level=args.level,
        modes=args.modes,
        seed=args.seed,
        n_jobs=args.n_jobs,
        fake_ratio=args.fake_ratio,
        theta_scale=args.theta_scale,
        geometry=args.geometry,
    )
    kw = {k: v for k, v in kw.items() if v is not None}
    try:
        config = (
            sim.SimulationConfig.full_scale(**kw)
            if args.full_scale
            else sim.SimulationConfig(**kw)
        )
    except TypeError as ex:
        raise ConfigError(str(ex)) from ex
    if args.write_fixture:
        paths = sim.write_fixture(config, args.write_fixture, args.exp_delta)
        print(json.dumps(paths, indent=2))
        return 0
    res = sim.run_study(config, args.out_dir)
    print(res.power_curves.to_string(index=False))
    return 0


def _windows(args):
    locs = geo.read_locations(args.locations)
    ids = [_.id for _ in locs]
    pop = None
    if args.counts:
        counts = pd.read_csv(args.counts, dtype={"id": str}).set_index("id")
        if "population" not in counts:
            raise ConfigError(f"{args.counts}: no population column")
        pop = counts.loc[ids, "population"].to_numpy(float)
    wins = geo.enumerate_windows(
        geo.distance_matrix(locs), args.max_fraction, pop, args.max_fraction_by
    )
    df = pd.DataFrame(
        {
            "window": np.arange(1, len(wins) + 1),
            "center_id": [ids[w.center] for w in wins],
            "radius": [w.radius for w in wins],
            "n_members": [len(w) for w in wins],
            "member_ids": [";".join(ids[i] for i in w.members) for w in wins],
        }
    )
    if args.out:
        df.to_csv(args.out, index=False)
        _logger.info(f"wrote {len(df)} windows to {args.out}")
    else:
        df.to_csv(sys.stdout, index=False)
    return 0


def _default(args):
    print(save_default(args.key, args.value))
    return 0


_VERBS = {
    "scan": _scan,
    "compare": _compare,
    "simulate": _simulate,
    "windows": _windows,
    "default": _default,
}


def main(argv=None):
    """Entry point of the ``fmscan`` command.

    Returns
    -------
    int
        Exit status: 0 on success, 1 when the run failed or a compared mode
        failed. Errors are printed to standard error as JSON.
    """
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=_LEVELS[min(args.verbose, 2)],
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return _VERBS[args.verb](args)
    except FmscanError as ex:
        print(json.dumps(ex.to_dict(), default=str), file=sys.stderr)
        return 1

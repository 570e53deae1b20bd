"""Report files: cluster CSV, GeoJSON, Monte Carlo replicates, the estimated
parameter function and the run manifest."""
import json
import logging
import math
import platform
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd

from fmscan.errors import InputError

_logger = logging.getLogger(__name__)

CLUSTER_COLS = [
    "cluster_rank",
    "center_id",
    "n_members",
    "member_ids",
    "relative_risk",
    "llr",
    "p_value",
]
_SEP = ";"


def cluster_table(result, ids):
    """Reported clusters of a scan as a data frame.

    Parameters
    ----------
    result : fmscan.scan.ScanResult
        With clusters from :func:`fmscan.scan.secondary_clusters`.
    ids : sequence of str
        Location ids by index.

    Returns
    -------
    pandas.DataFrame
        Columns ``cluster_rank, center_id, n_members, member_ids,
        relative_risk, llr, p_value``; member ids are ``;`` separated.
    """
    rows = [
        dict(
            cluster_rank=c.rank,
            center_id=ids[c.window.center],
            n_members=len(c.window),
            member_ids=_SEP.join(ids[i] for i in c.window.members),
            relative_risk=c.fit.relative_risk,
            llr=c.fit.llr,
            p_value=c.p_value,
        )
        for c in result.clusters
    ]
    return pd.DataFrame(rows, columns=CLUSTER_COLS)


def write_clusters(result, ids, pth):
    cluster_table(result, ids).to_csv(pth, index=False)
    _logger.info(f"wrote {len(result.clusters)} clusters to {pth}")


def read_clusters(pth):
    """Read a cluster CSV written by :func:`write_clusters`.

    Returns
    -------
    pandas.DataFrame
        ``member_ids`` parsed into tuples of ids.
    """
    df = pd.read_csv(pth, dtype={"center_id": str, "member_ids": str})
    missing = [c for c in CLUSTER_COLS if c not in df.columns]
    if missing:
        raise InputError(f"{pth}: missing columns {missing}", {"columns": missing})
    df["member_ids"] = df["member_ids"].map(lambda s: tuple(s.split(_SEP)))
    return df


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


def geojson(result, ids, coords):
    """FeatureCollection with one ``MultiPoint`` feature per reported cluster.

    Non-finite numbers are written as ``null``.
    """
    feats = []
    for c in result.clusters:
        mem = list(c.window.members)
        feats.append(
            {
                "type": "Feature",
                "geometry": {
                    "type": "MultiPoint",
                    "coordinates": [
                        [float(coords[i, 0]), float(coords[i, 1])] for i in mem
                    ],
                },
                "properties": {
                    "cluster_rank": c.rank,
                    "center_id": ids[c.window.center],
                    "radius": _num(c.window.radius),
                    "n_members": len(mem),
                    "member_ids": [ids[i] for i in mem],
                    "relative_risk": _num(c.fit.relative_risk),
                    "llr": _num(c.fit.llr),
                    "p_value": _num(c.p_value),
                    "direction": c.fit.direction,
                },
            }
        )
    return {"type": "FeatureCollection", "features": feats}


def write_geojson(result, ids, coords, pth):
    with open(pth, "w", encoding="utf-8") as f:
        json.dump(geojson(result, ids, coords), f, indent=2, sort_keys=True)
    _logger.info(f"wrote GeoJSON to {pth}")


def write_replicates(result, pth):
    reps = result.replicates
    df = pd.DataFrame({"replicate": np.arange(1, reps.size + 1), "lambda": reps})
    df.to_csv(pth, index=False)
    _logger.debug(f"wrote {reps.size} replicate statistics to {pth}")


def versions():
    """Versions of python and the numerical stack."""
    res = {"python": platform.python_version()}
    for pkg in ("fmscan", "numpy", "pandas", "scipy"):
        try:
            res[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            res[pkg] = None
    return res


def write_manifest(pth, config, files=(), status="ok", error=None, extra=None):
    """Write the run manifest: settings, seed, versions, outputs and status.

    No timestamps are recorded so that repeated runs give identical files.
    """
    doc = {
        "config": config,
        "seed": config.get("seed"),
        "versions": versions(),
        "files": sorted(Path(_).name for _ in files),
        "status": status,
        "error": error,
    }
    if extra:
        doc.update(extra)
    with open(pth, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True, default=_json_default)
    _logger.info(f"wrote manifest to {pth}")


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return _num(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, Path):
        return x.as_posix()
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def write_analysis(analysis, region, out_dir):
    """Write every report of one pipeline run into ``out_dir``.

    Returns
    -------
    list of pathlib.Path
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = analysis.result
    files = [out / "clusters.csv", out / "clusters.geojson", out / "lambda.csv"]
    write_clusters(res, region.ids, files[0])
    write_geojson(res, region.ids, region.coords, files[1])
    write_replicates(res, files[2])
    if analysis.theta is not None:
        files.append(out / "theta.csv")
        analysis.theta.to_csv(files[-1], index=False)
    if analysis.truncation is not None:
        files.append(out / "truncation.csv")
        analysis.truncation.to_csv(files[-1], index=False)
    return files

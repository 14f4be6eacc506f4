"""Write a run log to disk as CSV series, JSON records and SVG figures."""
from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .. import plotting
from .scenario import RunLog

SCHEMA_VERSION = 1
FORMATS = ("csv", "json", "svg")


class EmptyLogError(ValueError):
    """The run log has no recorded samples."""


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _dump(obj, path: Path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, default=_jsonable, allow_nan=True)
        fh.write("\n")


def write_timeseries(series: dict, path) -> Path:
    """``t`` then the other columns in the order given; every value at full precision."""
    path = Path(path)
    cols = list(series)
    data = np.column_stack([np.asarray(series[c], dtype=float) for c in cols])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in data:
            w.writerow(["%.17g" % v for v in row])
    return path


def read_timeseries(path) -> dict:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        cols = next(r)
        rows = [[float(v) for v in line] for line in r]
    arr = np.asarray(rows, dtype=float).reshape(-1, len(cols))
    return {c: arr[:, j].copy() for j, c in enumerate(cols)}


def _write_governor_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "target", "previous", "setpoint", "kappa", "binding", "evaluations", "alarm"])
        for g in rows:
            w.writerow(["%.17g" % g["t"], "%.17g" % g["target"], "%.17g" % g["previous"], "%.17g" % g["setpoint"],
                        "%.17g" % g["kappa"], g["binding"], g["evaluations"], int(g["alarm"])])


def _figures(log: RunLog, out: Path) -> list:
    s = log.series
    h = log.hours()
    files = [plotting.power_health(h, s["Q_RX_T"], s["Q_RX"], s["eta_p"], s["eta_s"], out / "power_health.svg")]
    recs = log.assimilation.records
    observed = list(log.assimilation.observed)
    if recs and observed:
        with np.errstate(divide="ignore", invalid="ignore"):
            err = 100.0 * np.abs(s["twin_Q_RX"] - s["Q_RX"]) / np.abs(s["Q_RX"])
        t_obs = np.array([r["t"] for r in recs]) / 3600.0
        var = np.array([r["prior_var_obs"][0] for r in recs])
        files.append(plotting.error_variance(h, err, t_obs, var, out / "error_variance.svg", observed[0]))
        ids = list(log.assimilation.theta_ids)
        if ids:
            files.append(plotting.parameter_panels(t_obs, [r["theta_mean"] for r in recs],
                                                   [r["theta_var"] for r in recs], ids, out / "parameters.svg"))
    return files


def emit_outputs(log: RunLog, out_dir, formats=FORMATS) -> list:
    """Write the requested artefacts into ``out_dir`` and return their paths.

    csv: timeseries.csv, governor.csv, assimilation.csv
    json: run.json (config, timing, schema), events.json, plans.json, assimilation.json
    svg: power_health.svg, error_variance.svg, parameters.svg
    """
    if log is None or log.empty:
        raise EmptyLogError("run log is empty; nothing to write")
    bad = set(formats) - set(FORMATS)
    if bad:
        raise ValueError(f"unknown output format(s): {sorted(bad)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    files = []
    if "csv" in formats:
        files.append(write_timeseries(log.series, out / "timeseries.csv"))
        _write_governor_csv(log.governor, out / "governor.csv")
        files.append(out / "governor.csv")
        log.assimilation.write_csv(out / "assimilation.csv")
        files.append(out / "assimilation.csv")
    if "json" in formats:
        _dump({"schema_version": SCHEMA_VERSION, "config": log.config, "timing": log.timing,
               "samples": int(log.series["t"].size)}, out / "run.json")
        _dump({"schema_version": SCHEMA_VERSION, "events": log.events}, out / "events.json")
        _dump({"schema_version": SCHEMA_VERSION, "plans": log.plans}, out / "plans.json")
        a = log.assimilation
        _dump({"schema_version": SCHEMA_VERSION, "theta_ids": list(a.theta_ids), "observed": list(a.observed),
               "initial_var_obs": getattr(a, "initial_var_obs", []), "records": a.records}, out / "assimilation.json")
        files += [out / n for n in ("run.json", "events.json", "plans.json", "assimilation.json")]
    if "svg" in formats:
        files += _figures(log, out)
    return [Path(f) for f in files]

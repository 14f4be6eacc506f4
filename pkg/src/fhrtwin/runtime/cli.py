"""Command line entry point: ``fhrtwin <command> ...``."""
from __future__ import annotations

import argparse
import errno
import json
import os
import sys
from importlib.resources import files
from pathlib import Path

import numpy as np

OUT_ENV = "FHRTWIN_OUT"
DEMOS = {"long-term": "long-term.toml", "short-term": "short-term.toml", "shock": "shock.toml"}


class CliError(RuntimeError):
    """A failure reported to the user as a JSON line on stderr."""


def _formats(value):
    out = tuple(v.strip() for v in value.split(",") if v.strip())
    bad = [v for v in out if v not in ("csv", "json", "svg")]
    if bad or not out:
        raise argparse.ArgumentTypeError(f"formats must be a comma list of csv, json, svg (got {value!r})")
    return out


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ENV) or "fhrtwin-out"
    return Path(root) / default_name


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the master seed")
    common.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV}/<name> or ./fhrtwin-out)")
    common.add_argument("--format", type=_formats, default=("csv", "json", "svg"),
                        help="comma list from csv,json,svg")
    p = argparse.ArgumentParser(prog="fhrtwin", description="Closed-loop digital twin of a salt-cooled reactor.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    r = sub.add_parser("run", parents=[common], help="run a scenario config (TOML)")
    r.add_argument("config")

    d = sub.add_parser("demo", parents=[common], help="run a shipped demonstration")
    d.add_argument("name", choices=sorted(DEMOS))
    d.add_argument("--smoke", action="store_true", help="two-month version of long-term")

    f = sub.add_parser("fit-surrogate", parents=[common], help="fit a surrogate network")
    f.add_argument("data", help="trajectory .npz file, or 'emulator' to generate training runs")
    f.add_argument("--kind", choices=("original", "shock"), default="original")

    s = sub.add_parser("sobol", parents=[common], help="run a Sobol study from a TOML study config")
    s.add_argument("study_config")

    c = sub.add_parser("compress", parents=[common], help="compress a surrogate into the hourly transition model")
    c.add_argument("net", help="'original', 'shock' or a saved network JSON")
    c.add_argument("--samples", type=int, default=400)
    return p


def _scenario(cfg, args, name):
    from .outputs import emit_outputs
    from .scenario import run_scenario

    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    log = run_scenario(cfg)
    out = _out_dir(args, name)
    paths = emit_outputs(log, out, args.format)
    return {"out": str(out), "files": [p.name for p in paths], "timing_s": round(log.timing["total"], 3),
            "alarms": sum(1 for e in log.events if e["event"] == "alarm")}


def _cmd_run(args):
    from .config import load_config

    cfg = load_config(args.config)
    return _scenario(cfg, args, Path(args.config).stem)


def _cmd_demo(args):
    from .config import load_config

    name = "long-term-smoke" if args.smoke and args.name == "long-term" else args.name
    fname = DEMOS[args.name] if name == args.name else "long-term-smoke.toml"
    cfg = load_config(files("fhrtwin.presets") / fname)
    return _scenario(cfg, args, name)


def _load_runs(path):
    """Runs stored as states_<i> (n, 42), targets_<i> (n,) and optional sg_delta_<i>."""
    from ..surrogate.training import Trajectory
    from ..variables import N_STATE

    with np.load(path) as z:
        ids = sorted(int(k.split("_")[1]) for k in z.files if k.startswith("states_"))
        if not ids:
            raise CliError(f"{path}: no states_<i> arrays found")
        runs = []
        for i in ids:
            st = np.asarray(z[f"states_{i}"], dtype=float)
            if st.ndim != 2 or st.shape[1] != N_STATE:
                raise CliError(f"{path}: states_{i} must have shape (n, {N_STATE})")
            tg = np.asarray(z[f"targets_{i}"], dtype=float)
            delta = float(z[f"sg_delta_{i}"]) if f"sg_delta_{i}" in z.files else 0.0
            runs.append(Trajectory(st, tg, delta))
    return runs


def _cmd_fit(args):
    from ..models import build_default
    from ..surrogate.training import (ORIGINAL_HOOKS, ORIGINAL_WIRING, build_shock_surrogate, fit_network)

    out = _out_dir(args, "surrogate")
    out.mkdir(parents=True, exist_ok=True)
    if args.data == "emulator":
        net = build_default(args.kind)
    else:
        if not Path(args.data).exists():
            raise FileNotFoundError(errno.ENOENT, "data file not found", args.data)
        runs = _load_runs(args.data)
        if args.kind == "original":
            net = fit_network(runs, ORIGINAL_WIRING, ORIGINAL_HOOKS, name="original")
        else:
            net = build_shock_surrogate(runs)
    path = out / f"{args.kind}-surrogate.json"
    net.save(path)
    return {"out": str(path), "blocks": [b.name for b in net.blocks],
            "theta_A": list(net.metadata.get("theta_A", []))}


def _read_toml(path):
    from .config import tomllib

    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(errno.ENOENT, "file not found", str(p))
    with open(p, "rb") as fh:
        return tomllib.load(fh)


def _resolve_net(spec):
    from ..models import default_net
    from ..surrogate.net import SurrogateNet

    if spec in ("original", "shock"):
        return default_net(spec)
    if not Path(spec).exists():
        raise FileNotFoundError(errno.ENOENT, "network file not found", spec)
    return SurrogateNet.load(spec)


def _cmd_sobol(args):
    from ..sensitivity import EmptySelectionError, run_study, select_theta_A, write_report

    raw = _read_toml(args.study_config)
    st = raw.get("study", raw)
    known = {"net", "outputs", "N", "halfwidth", "threshold", "level", "seed", "forced", "params", "n_boot"}
    unknown = set(st) - known
    if unknown:
        raise CliError(f"unknown study keys: {sorted(unknown)}")
    net = _resolve_net(st.get("net", "original"))
    seed = args.seed if args.seed is not None else int(st.get("seed", 0))
    outputs = tuple(st.get("outputs", ["Q_RX"]))
    study = run_study(net, st.get("params"), outputs, N=int(st.get("N", 2 ** 13)),
                      halfwidth=float(st.get("halfwidth", 0.5)), seed=seed, n_boot=int(st.get("n_boot", 200)),
                      level=st.get("level", "block"))
    try:
        selection = select_theta_A(study, float(st.get("threshold", 0.10)), st.get("forced", ()))
    except EmptySelectionError as exc:
        selection = {"empty": True, "top": exc.top}
    out = _out_dir(args, "sobol")
    fmts = tuple(f for f in args.format if f in ("json", "csv", "svg"))
    paths = write_report(study, out, selection, fmts)
    return {"out": str(out), "files": [p.name for p in paths], "D": study.D, "rows": study.n_rows,
            "seconds": round(study.seconds, 3), "selection": selection}


def _cmd_compress(args):
    from ..operator import SamplingPlan, compress_surrogate

    net = _resolve_net(args.net)
    plan = SamplingPlan(n_samples=args.samples, seed=0 if args.seed is None else args.seed)
    model = compress_surrogate(net, plan=plan)
    out = _out_dir(args, "compressed")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "transition_model.json"
    path.write_text(json.dumps(model.to_dict(), indent=1))
    return {"out": str(path), "report": model.report}


COMMANDS = {"run": _cmd_run, "demo": _cmd_demo, "fit-surrogate": _cmd_fit, "sobol": _cmd_sobol,
            "compress": _cmd_compress}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)  # exits 2 on usage errors
    try:
        summary = COMMANDS[args.command](args)
    except Exception as exc:  # every failure leaves one JSON line on stderr
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        if isinstance(exc, FileNotFoundError):
            err["path"] = exc.filename or str(exc)
        sys.stderr.write(json.dumps(err) + "\n")
        return 1
    sys.stdout.write(json.dumps(summary, default=str) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())

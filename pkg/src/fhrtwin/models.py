"""Fitted default networks, cached on disk by a hash of the plant constants."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

from .constants import PlantConstants, default_constants
from .sensitivity import run_study, select_theta_A
from .surrogate.net import SurrogateNet
from .surrogate.training import (ORIGINAL_HOOKS, ORIGINAL_WIRING, build_shock_surrogate, fit_network,
                                 nominal_training_set, shock_training_set)

CACHE_ENV = "FHRTWIN_CACHE"
# coefficients that set the predicted core energy in the shock network:
# flow block and power block responses to the target power
SHOCK_FORCED = ("I.B,0,0", "II.B,2,0")
# bump when the fitting procedure changes so stale cached nets are refitted
FIT_VERSION = 2


def cache_dir() -> Path:
    root = os.environ.get(CACHE_ENV) or os.path.join(os.path.expanduser("~"), ".cache", "fhrtwin")
    return Path(root)


def constants_hash(c: PlantConstants) -> str:
    blob = json.dumps(c.raw, sort_keys=True, default=float).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _select(net: SurrogateNet, outputs, threshold, forced, N, level):
    sel = []
    for o in outputs:
        study = run_study(net, outputs=(o,), N=N, seed=0, n_boot=50, level=level)
        try:
            picked = select_theta_A(study, threshold)
        except ValueError:
            picked = []
        sel += [p for p in picked if p not in sel]
    sel += [p for p in forced if p not in sel]
    return sel


def build_default(kind: str = "original", constants: PlantConstants | None = None, study_n: int = 2 ** 12) -> SurrogateNet:
    c = constants or default_constants()
    nominal = nominal_training_set(constants=c)
    if kind == "original":
        net = fit_network(nominal, ORIGINAL_WIRING, ORIGINAL_HOOKS, constants=c, name="original")
        theta_a = _select(net, ("Q_RX",), 0.10, (), study_n, "block")
    elif kind == "shock":
        net = build_shock_surrogate(shock_training_set(constants=c), nominal=nominal, constants=c)
        theta_a = _select(net, ("Q_RX", "m_P_s"), 0.20, SHOCK_FORCED, study_n, "row")
    else:
        raise ValueError(f"unknown network kind {kind!r}")
    meta = dict(net.metadata)
    meta.update({"kind": kind, "theta_A": theta_a, "constants_hash": constants_hash(c)})
    return SurrogateNet(net.blocks, net.hooks, net.mode, net.scale, net.input_scale, net.pump_r, meta, net.constants)


def default_net(kind: str = "original", constants: PlantConstants | None = None, refresh: bool = False) -> SurrogateNet:
    """Load (or fit and cache) the default network of the given kind."""
    c = constants or default_constants()
    path = cache_dir() / f"{kind}-v{FIT_VERSION}-{constants_hash(c)}.json"
    if path.exists() and not refresh:
        try:
            return SurrogateNet.load(path, constants=c)
        except (ValueError, KeyError, json.JSONDecodeError):
            pass
    net = build_default(kind, c)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    net.save(tmp)
    os.replace(tmp, path)
    return net

"""Variance-based sensitivity of surrogate coefficients.

Saltelli cross-sampling over a scrambled Sobol sequence, first-order and
total-order indices with bootstrap intervals, and the selection rule that
picks which coefficients the ensemble filter should estimate online.
"""
from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .plant import steady_state
from .surrogate.net import SurrogateNet, surrogate_step_batch
from .variables import IDX


class ZeroVarianceError(ValueError):
    """All indices undefined because the output never moves."""


class EmptySelectionError(ValueError):
    def __init__(self, message, top):
        super().__init__(message)
        self.top = top


def _check_bounds(D, N, bounds):
    if D < 1 or N < 1:
        raise ValueError("D and N must be positive")
    bounds = np.asarray(bounds, dtype=float).reshape(D, 2)
    if not np.all(np.isfinite(bounds)) or np.any(bounds[:, 1] < bounds[:, 0]):
        raise ValueError("bounds must be finite with low <= high")
    if N & (N - 1):
        warnings.warn(f"N={N} is not a power of two; the Sobol sequence loses its balance properties",
                      stacklevel=3)
    return bounds


def _base(D, N, seed, scramble):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return qmc.Sobol(2 * D, scramble=scramble, seed=seed).random(N)


def _cross(base, bounds):
    """Expand base rows [A | B] into the 2D+2 cross-sampled rows per base row."""
    D = bounds.shape[0]
    A, B = base[:, :D], base[:, D:]
    out = np.empty((base.shape[0], 2 * D + 2, D))
    out[:, 0] = A
    out[:, 1:D + 1] = A[:, None, :]
    out[:, D + 1:2 * D + 1] = B[:, None, :]
    out[:, -1] = B
    i = np.arange(D)
    out[:, 1 + i, i] = B[:, i]
    out[:, D + 1 + i, i] = A[:, i]
    out = out.reshape(-1, D)
    return bounds[:, 0] + out * (bounds[:, 1] - bounds[:, 0])


def saltelli_sample(D: int, N: int, bounds, seed: int = 0, scramble: bool = True) -> np.ndarray:
    """N(2D+2) rows; each base row j expands to A, AB_1..AB_D, BA_1..BA_D, B.

    ``bounds`` is (D, 2) of [low, high]. AB_i is A with column i taken from B,
    BA_i is B with column i taken from A.
    """
    bounds = _check_bounds(D, N, bounds)
    return _cross(_base(D, N, seed, scramble), bounds)


def _estimates(fA, fB, fAB, fBA):
    V = np.var(np.concatenate([fA, fB], axis=0), axis=0)
    s1 = np.mean(fB[:, None] * (fAB - fA[:, None]), axis=0)
    s2 = np.mean(fA[:, None] * (fBA - fB[:, None]), axis=0)
    t1 = 0.5 * np.mean((fA[:, None] - fAB) ** 2, axis=0)
    t2 = 0.5 * np.mean((fB[:, None] - fBA) ** 2, axis=0)
    return 0.5 * (s1 + s2), 0.5 * (t1 + t2), V


@dataclass
class SobolIndices:
    S: np.ndarray
    ST: np.ndarray
    S_conf: np.ndarray
    ST_conf: np.ndarray
    variance: float


def sobol_indices(Y, D: int, n_boot: int = 200, confidence: float = 0.95, seed: int = 0) -> SobolIndices:
    """Indices from evaluations laid out as :func:`saltelli_sample` rows."""
    Y = np.asarray(Y, dtype=float).reshape(-1)
    if Y.size % (2 * D + 2):
        raise ValueError("evaluation count is not a multiple of 2D+2")
    if not np.all(np.isfinite(Y)):
        raise ValueError("evaluations must be finite")
    R = Y.reshape(-1, 2 * D + 2)
    fA, fB, fAB, fBA = R[:, 0], R[:, -1], R[:, 1:D + 1], R[:, D + 1:2 * D + 1]
    s, t, V = _estimates(fA, fB, fAB, fBA)
    if not V > 1e-300 * max(1.0, float(np.mean(Y * Y))):
        raise ZeroVarianceError("output variance is zero; indices are undefined")
    rng = np.random.default_rng(seed)
    n = R.shape[0]
    bs = np.empty((n_boot, D))
    bt = np.empty((n_boot, D))
    for b in range(n_boot):
        k = rng.integers(0, n, n)
        sb, tb, Vb = _estimates(fA[k], fB[k], fAB[k], fBA[k])
        bs[b] = sb / Vb if Vb > 0 else np.nan
        bt[b] = tb / Vb if Vb > 0 else np.nan
    z = 0.5 * (1 - confidence)
    half = lambda a: 0.5 * (np.nanquantile(a, 1 - z, axis=0) - np.nanquantile(a, z, axis=0))
    return SobolIndices(s / V, t / V, half(bs), half(bt), float(V))


def ishigami(X, a: float = 7.0, b: float = 0.1):
    X = np.asarray(X)
    return np.sin(X[:, 0]) + a * np.sin(X[:, 1]) ** 2 + b * X[:, 2] ** 4 * np.sin(X[:, 0])


def ishigami_indices(a: float = 7.0, b: float = 0.1):
    """Closed-form (S, ST) for the Ishigami function on [-pi, pi]^3."""
    V1 = 0.5 * (1 + b * np.pi ** 4 / 5) ** 2
    V2 = a * a / 8
    V13 = b * b * np.pi ** 8 * (1 / 18 - 1 / 50)
    V = V1 + V2 + V13
    return np.array([V1, V2, 0.0]) / V, np.array([V1 + V13, V2, V13]) / V


@dataclass
class SobolStudy:
    param_ids: list
    centers: np.ndarray
    halfwidth: float
    N: int
    outputs: list
    S: dict = field(default_factory=dict)
    ST: dict = field(default_factory=dict)
    S_conf: dict = field(default_factory=dict)
    ST_conf: dict = field(default_factory=dict)
    n_rows: int = 0
    seconds: float = 0.0
    seed: int = 0

    @property
    def D(self):
        return len(self.param_ids)

    def to_dict(self):
        return {
            "param_ids": list(self.param_ids), "centers": self.centers.tolist(), "halfwidth": self.halfwidth,
            "N": self.N, "outputs": list(self.outputs), "n_rows": self.n_rows, "seconds": self.seconds,
            "seed": self.seed,
            "indices": {o: {"S": self.S[o].tolist(), "ST": self.ST[o].tolist(), "S_conf": self.S_conf[o].tolist(),
                            "ST_conf": self.ST_conf[o].tolist()} for o in self.outputs},
        }


def _row_of(name):
    kind, rest = name.split(".", 1)[1].split(",", 1)
    return kind, int(rest.split(",")[0])


def default_study_params(net: SurrogateNet, outputs=("Q_RX",), level: str = "block"):
    """Intercept, state and input coefficients upstream of ``outputs`` in one step.

    ``level="block"`` takes every coefficient of each block on the lag-0 path;
    ``level="row"`` only the rows producing the variables on that path.
    Moving-average coefficients are left out because the one-step protocol
    runs with zero noise, which makes them inert.
    """
    if level not in ("block", "row"):
        raise ValueError("level must be 'block' or 'row'")
    owner = {v: b for b in net.blocks for v in b.outputs}
    wanted, queue = set(), [o for o in outputs]
    while queue:
        v = queue.pop()
        if v in wanted or v not in owner:
            continue
        wanted.add(v)
        b = owner[v]
        queue += [u for u, lag in b.inputs if lag == 0]
        if level == "block":
            queue += list(b.outputs)
    keep = []
    for name in net.theta_names():
        bname = name.split(".")[0]
        kind, row = _row_of(name)
        if kind.startswith("M"):
            continue
        b = net.block(bname)
        if b.outputs[row] in wanted:
            keep.append(name)
    return keep


def run_study(net: SurrogateNet, param_ids=None, outputs=("Q_RX",), N: int = 2 ** 13, halfwidth: float = 0.5,
              seed: int = 0, chunk: int = 256, n_boot: int = 200, level: str = "block") -> SobolStudy:
    """One surrogate step at the 100% fixed point with coefficients on center +- halfwidth.

    Sample rows are generated ``chunk`` base rows at a time, so memory stays
    flat for large D.
    """
    t0 = time.perf_counter()
    param_ids = list(param_ids) if param_ids is not None else default_study_params(net, outputs, level)
    idx = net.theta_index(param_ids)
    theta0 = net.theta()
    centers = theta0[idx]
    D = len(idx)
    bounds = _check_bounds(D, N, np.stack([centers - halfwidth, centers + halfwidth], axis=1))
    base = _base(D, N, seed, True)
    x_ref = steady_state(1.0, constants=net.constants).x
    full = net.constants.full_power
    out_rows = [IDX[o] for o in outputs]
    Y = np.empty((N * (2 * D + 2), len(outputs)))
    per = 2 * D + 2
    for a in range(0, N, chunk):
        b = min(a + chunk, N)
        X = _cross(base[a:b], bounds)
        th = np.repeat(theta0[None], X.shape[0], axis=0)
        th[:, idx] = X
        xs = np.repeat(x_ref[None], X.shape[0], axis=0)
        with np.errstate(all="ignore"):
            Y[a * per:b * per] = surrogate_step_batch(net, xs, xs, full, theta=th)[:, out_rows]
    study = SobolStudy(param_ids, centers, halfwidth, N, list(outputs), n_rows=Y.shape[0], seed=seed)
    for j, o in enumerate(outputs):
        res = sobol_indices(Y[:, j], D, n_boot=n_boot, seed=seed)
        study.S[o], study.ST[o], study.S_conf[o], study.ST_conf[o] = res.S, res.ST, res.S_conf, res.ST_conf
    study.seconds = time.perf_counter() - t0
    return study


def select_theta_A(study: SobolStudy, threshold: float = 0.10, forced=(), top_k: int = 8) -> list:
    """Coefficients above ``threshold`` on both indices for any output, plus ``forced``."""
    picked = set()
    for o in study.outputs:
        hit = (study.S[o] > threshold) & (study.ST[o] > threshold)
        picked |= {study.param_ids[i] for i in np.flatnonzero(hit)}
    if not picked:
        best = np.max([np.minimum(study.S[o], study.ST[o]) for o in study.outputs], axis=0)
        order = np.argsort(-best)[:top_k]
        top = [(study.param_ids[i], float(best[i])) for i in order]
        raise EmptySelectionError(f"no coefficient exceeds {threshold}; top candidates: {top}", top)
    ordered = [p for p in study.param_ids if p in picked]
    for f in forced:
        if f not in ordered:
            ordered.append(f)
    return ordered


def write_report(study: SobolStudy, out_dir, selection=None, formats=("json", "csv", "svg")) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    if "json" in formats:
        p = out / "sobol_study.json"
        d = study.to_dict()
        d["selection"] = selection
        p.write_text(json.dumps(d, indent=1))
        paths.append(p)
    if "csv" in formats:
        p = out / "sobol_indices.csv"
        with p.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["output", "param", "S", "S_conf", "ST", "ST_conf"])
            for o in study.outputs:
                for i, pid in enumerate(study.param_ids):
                    w.writerow([o, pid, repr(float(study.S[o][i])), repr(float(study.S_conf[o][i])),
                                repr(float(study.ST[o][i])), repr(float(study.ST_conf[o][i]))])
        paths.append(p)
    if "svg" in formats:
        from .plotting import sobol_bars

        for o in study.outputs:
            p = out / f"sobol_{o}.svg"
            sobol_bars(study.param_ids, study.S[o], study.ST[o], study.S_conf[o], study.ST_conf[o], o, p)
            paths.append(p)
    return paths

"""Build surrogate networks from emulator trajectories."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from ..constants import PlantConstants, default_constants
from ..demand import expand, hourly_profile
from ..plant import inject_sg_shock, simulate, steady_state
from ..variables import IDX, N_STATE, STATE_IDS
from .net import HOOK_VARS, TARGET, Block, SurrogateNet
from .varmax import VarmaxFitError, fit_varmax, spectral_radius

STEPS_PER_HOUR = 720
TEMPS = ("T_c_in", "T_c_out", "T_ihx_p_in", "T_ihx_p_out", "T_ihx_s_in", "T_ihx_s_out", "T_sg_in")
PRESSURES = ("P_c_in", "P_c_out", "P_ihx_p_in", "P_ihx_p_out", "P_ihx_s_in", "P_ihx_s_out", "P_sg_in", "P_sg_out")
PRECURSORS = ("C_1", "C_2", "C_3", "C_4", "C_5", "C_6")

# (name, outputs, inputs) of the original network; blocks I and II carry the
# parameters the filter learns.
ORIGINAL_WIRING = (
    ("I", ("z_cr", "rho_cr"), ((TARGET, 0), ("Q_RX", 1), ("N_Xe", 1))),
    ("II", ("Q_RX", "rho_f", "rho_m"), ((TARGET, 0), ("z_cr", 0), ("rho_cr", 0), ("N_Xe", 1))),
    ("III", PRECURSORS, (("Q_RX", 0),)),
    ("IV", ("m_P_p", "m_P_s"), (("Q_RX", 0), ("T_c_out", 1), ("T_c_in", 1))),
    ("V", TEMPS, (("Q_RX", 0), ("m_P_p", 0), ("m_P_s", 0))),
    ("VI", ("Q_HX", "Q_SG", "rho_c"), (("Q_RX", 0), ("m_P_p", 0), ("m_P_s", 0), ("T_c_in", 0), ("T_c_out", 0))),
    ("VII", PRESSURES, (("m_P_p", 0), ("m_P_s", 0))),
)
ORIGINAL_HOOKS = ("clock", "xenon", "pumps", "hold_boundary")

# Shock-adapted network: secondary pump flow first, fed to everything else.
SHOCK_WIRING = (
    ("I", ("m_P_s",), ((TARGET, 0), ("Q_RX", 1), ("T_c_in", 1))),
    ("II", ("z_cr", "rho_cr", "Q_RX", "rho_f", "rho_m") + PRECURSORS,
     ((TARGET, 0), ("N_Xe", 1), ("m_P_s", 0))),
    ("III", ("m_P_p",), (("Q_RX", 0), ("T_c_out", 1), ("m_P_s", 0))),
    ("IV", TEMPS + ("T_sg_out",), (("Q_RX", 0), ("m_P_p", 0), ("m_P_s", 0))),
    ("V", ("Q_HX", "Q_SG", "rho_c"), (("Q_RX", 0), ("m_P_p", 0), ("m_P_s", 0), ("T_c_in", 0), ("T_c_out", 0))),
    ("VI", PRESSURES, (("m_P_p", 0), ("m_P_s", 0))),
)
SHOCK_HOOKS = ("clock", "xenon", "pumps")


@dataclass
class Trajectory:
    """Emulator run sampled every 5 s: ``states[k]`` follows ``targets[k]`` (W)."""

    states: np.ndarray
    targets: np.ndarray
    sg_delta: float = 0.0


def emulator_run(hourly_fractions, start_fraction=None, shock=None, K_p=1.0, K_s=1.0,
                 constants: PlantConstants | None = None, steps_per_hour=STEPS_PER_HOUR) -> Trajectory:
    """Run the emulator through hourly targets; ``shock=(step, delta_K)`` optional.

    The two seed states (steady at ``start_fraction``) are prepended so that
    the trajectory can be replayed by a two-lag model from its first rows.
    """
    c = constants or default_constants()
    hourly = np.asarray(hourly_fractions, dtype=float)
    start = hourly[0] if start_fraction is None else start_fraction
    st = steady_state(start, K_p, K_s, constants=c)
    targets = expand(hourly, steps_per_hour) * c.full_power
    seed0 = st.x.copy()
    seed0[IDX["t"]] -= 5.0
    seeds = np.vstack([seed0, st.x])
    if shock is None:
        _, traj = simulate(st, targets, K_p=K_p, K_s=K_s, constants=c)
        delta = 0.0
    else:
        k_shock, delta = shock
        st1, tr1 = simulate(st, targets[:k_shock], K_p=K_p, K_s=K_s, constants=c)
        st1 = inject_sg_shock(st1, delta, constants=c)
        _, tr2 = simulate(st1, targets[k_shock:], K_p=K_p, K_s=K_s, constants=c)
        traj = np.vstack([tr1, tr2])
    tseed = np.array([c.full_power * start] * 2)
    return Trajectory(np.vstack([seeds, traj]), np.concatenate([tseed, targets]), delta)


def nominal_training_set(seed=11, n_runs=8, hours=24, constants=None, low=0.5, high=1.0):
    rng = np.random.default_rng(seed)
    runs = []
    for i in range(n_runs):
        start = float(rng.uniform(low, high)) if i else 1.0
        prof = hourly_profile(hours, rng, low=low, high=high, start=start)
        runs.append(emulator_run(prof, start_fraction=start, constants=constants))
    return runs


def shock_training_set(seed=13, n_runs=6, hours=21, constants=None, max_shock=8.0, low=0.6, high=1.0):
    """Power moves in 60-100 % with SG boundary steps up to +/- ``max_shock`` K."""
    rng = np.random.default_rng(seed)
    runs = []
    deltas = np.linspace(-max_shock, max_shock, n_runs)
    for i, delta in enumerate(deltas):
        start = float(rng.uniform(low, high))
        prof = hourly_profile(hours, rng, low=low, high=high, start=start)
        k = int(rng.integers(2, hours - 2)) * STEPS_PER_HOUR + int(rng.integers(0, STEPS_PER_HOUR))
        runs.append(emulator_run(prof, start_fraction=start, shock=(k, float(delta)), constants=constants))
    return runs


def _scale_vector(x_ref):
    s = np.abs(np.asarray(x_ref, dtype=float)).copy()
    s[s < 1e-9] = 1.0
    s[IDX["t"]] = 1.0
    return s


def _block_data(run: Trajectory, outputs, inputs, scale, input_scale):
    oi = [IDX[v] for v in outputs]
    z = run.states / scale
    X = z[:, oi]
    cols = []
    for v, lag in inputs:
        if v == TARGET:
            col = run.targets / input_scale
        else:
            col = np.empty(z.shape[0])
            col[lag:] = z[:z.shape[0] - lag, IDX[v]]
            col[:lag] = z[0, IDX[v]]
        cols.append(col)
    return X, np.column_stack(cols)


def _fit_pump_r(runs):
    s = np.vstack([r.states for r in runs])
    out = []
    for m, dp in (("m_P_p", "dP_p"), ("m_P_s", "dP_s")):
        m2 = s[:, IDX[m]] ** 2
        out.append(float(m2 @ s[:, IDX[dp]] / (m2 @ m2)))
    return tuple(out)


MAX_RADIUS = 0.9995


def _fit_stable(xs, us, anchor, ridge, max_radius=MAX_RADIUS):
    """Fit, raising the ridge tenfold until the block's own dynamics are stable.

    Blocks trained on closed-loop data see a narrow manifold; unregularised
    coefficients off that manifold can carry growing modes that filter noise
    would excite.
    """
    lam = ridge
    while True:
        params = fit_varmax(xs, us, p=2, q=1, anchor=anchor, ridge=lam)
        rad = spectral_radius(params)
        if rad < max_radius or lam >= 1.0:
            params.report.update({"ridge": lam, "spectral_radius": rad, "stable": rad < max_radius})
            return params
        lam = max(lam * 10.0, 1e-9)


def fit_network(runs, wiring, hooks, mode="normalized", constants=None, anchor=True,
                ridge=1e-9, name="surrogate") -> SurrogateNet:
    """Fit every block of ``wiring`` on the trajectory set."""
    c = constants or default_constants()
    x_ref = steady_state(1.0, constants=c).x
    if mode == "normalized":
        scale = _scale_vector(x_ref)
        input_scale = c.full_power
    else:
        scale = np.ones(N_STATE)
        input_scale = 1.0
    blocks = []
    for bname, outputs, inputs in wiring:
        xs, us = [], []
        for run in runs:
            X, U = _block_data(run, outputs, inputs, scale, input_scale)
            xs.append(X)
            us.append(U)
        anc = None
        if anchor:
            ref_run = Trajectory(np.vstack([x_ref] * 3), np.full(3, c.full_power))
            Xr, Ur = _block_data(ref_run, outputs, inputs, scale, input_scale)
            anc = (Xr[-1], Ur[-1])
        params = _fit_stable(xs, us, anc, ridge)
        blocks.append(Block(bname, outputs, inputs, params))
    meta = {"name": name, "wiring": [[b, list(o), [list(i) for i in inp]] for b, o, inp in wiring],
            "n_runs": len(runs), "samples": int(sum(r.states.shape[0] for r in runs))}
    return SurrogateNet(tuple(blocks), hooks, mode, scale, input_scale, _fit_pump_r(runs), meta, c)


def build_shock_surrogate(training, nominal=None, constants=None, ridge=1e-9) -> SurrogateNet:
    """Six-block raw-unit network for SG boundary shocks.

    ``training`` must contain runs with non-zero SG boundary changes. Block I
    (secondary pump flow) is fitted on nominal data only: ``nominal`` if
    given, otherwise the shock-free part of ``training``.
    """
    training = list(training)
    if not any(abs(r.sg_delta) > 0 for r in training):
        raise VarmaxFitError("training set has no SG boundary perturbations (missing shock coverage)")
    nominal = [r for r in training if r.sg_delta == 0] if nominal is None else list(nominal)
    if not nominal:
        raise VarmaxFitError("block I needs shock-free trajectories")
    c = constants or default_constants()
    x_ref = steady_state(1.0, constants=c).x
    blocks = []
    for i, (bname, outputs, inputs) in enumerate(SHOCK_WIRING):
        runs = nominal if i == 0 else training
        xs, us = [], []
        for run in runs:
            X, U = _block_data(run, outputs, inputs, np.ones(N_STATE), 1.0)
            xs.append(X)
            us.append(U)
        ref_run = Trajectory(np.vstack([x_ref] * 3), np.full(3, c.full_power))
        Xr, Ur = _block_data(ref_run, outputs, inputs, np.ones(N_STATE), 1.0)
        params = _fit_stable(xs, us, (Xr[-1], Ur[-1]), ridge)
        blocks.append(Block(bname, outputs, inputs, params))
    meta = {"name": "shock", "block_I_training": "nominal", "downstream_training": "shock"}
    return SurrogateNet(tuple(blocks), SHOCK_HOOKS, "raw", np.ones(N_STATE), 1.0,
                        _fit_pump_r(training), meta, c)

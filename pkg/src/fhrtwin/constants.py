"""Load plant constants and flatten them into the array the kernels read."""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

# Positions inside the flat constants vector handed to the numba kernels.
_FLAT_KEYS = (
    "full_power", "t_core_out", "t_core_in", "rod_speed_max",
    "gen_time", "alpha_f", "alpha_m", "alpha_c", "rod_worth", "rod_ref", "rod_min", "rod_max",
    "lam_i", "lam_x", "sig_x", "gam_i", "gam_x", "nu", "flux0",
    "fuel_frac", "r_fuel", "c_fuel", "g_mod", "c_mod", "c_core", "c_leg_p", "c_leg_s",
    "c_ihx_p", "c_ihx_s", "pump_tau",
    "cp_p", "rho_p", "mdot_p0", "cp_s", "rho_s", "mdot_s0", "ua0",
    "r_loop_p", "r_loop_s", "a_pump_p", "b_pump_p", "a_pump_s", "b_pump_s", "eff_p", "eff_s",
    "p_ref_p", "p_ref_s", "split_core", "split_hl_p", "split_ihx_p",
    "split_cl_s", "split_ihx_s", "split_hl_s",
    "rod_kp", "rod_ki", "rod_kd", "pri_kp", "pri_ki", "pri_kd", "sec_kp", "sec_ki", "sec_kd",
    "flow_min", "flow_max",
    "tf_ref", "tm_ref", "tcavg_ref", "xe_bias",
    "w_pump_p0", "w_pump_s0",
)
C = {key: i for i, key in enumerate(_FLAT_KEYS)}
for _i in range(6):
    C[f"beta_{_i}"] = len(_FLAT_KEYS) + _i
    C[f"lam_{_i}"] = len(_FLAT_KEYS) + 6 + _i
N_FLAT = len(_FLAT_KEYS) + 12
# the same positions as module-level ints, which numba can freeze as constants
globals().update({key.upper(): i for key, i in C.items()})


def counterflow_effectiveness(ntu, cr):
    """Effectiveness of a counterflow exchanger for ``NTU`` and capacity ratio ``cr``."""
    if abs(1.0 - cr) < 1e-9:
        return ntu / (1.0 + ntu)
    e = math.exp(-ntu * (1.0 - cr))
    return (1.0 - e) / (1.0 - cr * e)


def xenon_equilibrium(power_fraction, c):
    """Equilibrium (N_I, N_Xe) in reactivity units at a relative power."""
    phi = c["flux_full_power"] * power_fraction
    src = c["sigma_xenon"] * phi / c["nu"]
    n_i = c["yield_iodine"] * src / c["lambda_iodine"]
    n_xe = (c["yield_iodine"] + c["yield_xenon"]) * src / (c["lambda_xenon"] + c["sigma_xenon"] * phi)
    return n_i, n_xe


@dataclass
class PlantConstants:
    raw: dict
    flat: np.ndarray = field(repr=False)

    @property
    def full_power(self):
        return self.raw["plant"]["full_power"]

    def __getitem__(self, key):
        return self.flat[C[key]]


def _derive(raw):
    p, k, fb, xe, th = raw["plant"], raw["kinetics"], raw["feedback"], raw["xenon"], raw["thermal"]
    pr, se, ct = raw["primary"], raw["secondary"], raw["control"]
    q0 = p["full_power"]
    d = {}
    d["full_power"] = q0
    d["t_core_out"] = p["t_core_out"]
    d["t_core_in"] = p["t_core_in"]
    d["rod_speed_max"] = p["rod_speed_max"]
    d["gen_time"] = k["generation_time"]
    d["alpha_f"] = fb["alpha_fuel"]
    d["alpha_m"] = fb["alpha_moderator"]
    d["alpha_c"] = fb["alpha_coolant"]
    d["rod_worth"] = fb["rod_worth"]
    d["rod_ref"] = fb["rod_reference"]
    d["rod_min"] = fb["rod_min"]
    d["rod_max"] = fb["rod_max"]
    d["lam_i"] = xe["lambda_iodine"]
    d["lam_x"] = xe["lambda_xenon"]
    d["sig_x"] = xe["sigma_xenon"]
    d["gam_i"] = xe["yield_iodine"]
    d["gam_x"] = xe["yield_xenon"]
    d["nu"] = xe["nu"]
    d["flux0"] = xe["flux_full_power"]

    dt_core = p["t_core_out"] - p["t_core_in"]
    mdot_p0 = q0 / (pr["cp"] * dt_core)
    mdot_s0 = se["rated_volume_flow"] * se["density"]
    cap_p = mdot_p0 * pr["cp"]
    cap_s = mdot_s0 * se["cp"]
    d["fuel_frac"] = th["fuel_fraction"]
    d["r_fuel"] = th["fuel_rise"] / (th["fuel_fraction"] * q0)
    d["c_fuel"] = th["fuel_tau"] / d["r_fuel"]
    d["g_mod"] = (1.0 - th["fuel_fraction"]) * q0 / th["moderator_rise"]
    d["c_mod"] = th["moderator_tau"] * d["g_mod"]
    d["c_core"] = th["core_coolant_tau"] * cap_p
    d["c_leg_p"] = th["leg_tau"] * cap_p
    d["c_leg_s"] = th["leg_tau"] * cap_s
    d["c_ihx_p"] = th["ihx_tau"] * cap_p
    d["c_ihx_s"] = th["ihx_tau"] * cap_s
    d["pump_tau"] = th["pump_tau"]
    d["cp_p"] = pr["cp"]
    d["rho_p"] = pr["density"]
    d["mdot_p0"] = mdot_p0
    d["cp_s"] = se["cp"]
    d["rho_s"] = se["density"]
    d["mdot_s0"] = mdot_s0

    # UA at the rated point: counterflow exchanger delivering full power with the
    # declared secondary rise; solved for NTU by bisection.
    rise_s = q0 / cap_s
    c_min, c_max = min(cap_p, cap_s), max(cap_p, cap_s)
    eps_target = q0 / (c_min * (p["t_core_out"] - p["t_sg_out"]))
    lo, hi = 1e-6, 50.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if counterflow_effectiveness(mid, c_min / c_max) < eps_target:
            lo = mid
        else:
            hi = mid
    d["ua0"] = 0.5 * (lo + hi) * c_min
    d["_secondary_rise"] = rise_s

    v_p0 = mdot_p0 / pr["density"]
    v_s0 = se["rated_volume_flow"]
    d["r_loop_p"] = pr["rated_head"] / mdot_p0**2
    d["r_loop_s"] = se["rated_head"] / mdot_s0**2
    d["a_pump_p"] = pr["shutoff_ratio"] * pr["rated_head"] / pr["rated_speed"] ** 2
    d["b_pump_p"] = (pr["shutoff_ratio"] - 1.0) * pr["rated_head"] / v_p0**2
    d["a_pump_s"] = se["shutoff_ratio"] * se["rated_head"] / se["rated_speed"] ** 2
    d["b_pump_s"] = (se["shutoff_ratio"] - 1.0) * se["rated_head"] / v_s0**2
    d["eff_p"] = pr["efficiency"]
    d["eff_s"] = se["efficiency"]
    d["p_ref_p"] = pr["pressure_ref"]
    d["p_ref_s"] = se["pressure_ref"]
    d["split_core"] = pr["split_core"]
    d["split_hl_p"] = pr["split_hot_leg"]
    d["split_ihx_p"] = pr["split_ihx"]
    d["split_cl_s"] = se["split_cold_leg"]
    d["split_ihx_s"] = se["split_ihx"]
    d["split_hl_s"] = se["split_hot_leg"]
    for name in ("rod", "primary", "secondary"):
        short = {"rod": "rod", "primary": "pri", "secondary": "sec"}[name]
        for g in ("kp", "ki", "kd"):
            d[f"{short}_{g}"] = ct[f"{name}_{g}"]
    d["flow_min"] = ct["flow_min"]
    d["flow_max"] = ct["flow_max"]

    tcavg = 0.5 * (p["t_core_out"] + p["t_core_in"])
    d["tcavg_ref"] = tcavg
    d["tf_ref"] = tcavg + th["fuel_rise"]
    d["tm_ref"] = tcavg + th["moderator_rise"]
    _, xe_eq = xenon_equilibrium(1.0, xe)
    d["xe_bias"] = xe_eq
    d["w_pump_p0"] = pr["rated_head"] * v_p0 / pr["efficiency"]
    d["w_pump_s0"] = se["rated_head"] * v_s0 / se["efficiency"]
    return d


def load_constants(path: str | Path | None = None, overrides: dict | None = None) -> PlantConstants:
    """Read the constants file (packaged default when ``path`` is None)."""
    if path is None:
        text = resources.files("fhrtwin").joinpath("constants.toml").read_text()
    else:
        text = Path(path).read_text()
    raw = tomllib.loads(text)
    for section, values in (overrides or {}).items():
        raw.setdefault(section, {}).update(values)
    d = _derive(raw)
    flat = np.zeros(N_FLAT)
    for key in _FLAT_KEYS:
        flat[C[key]] = d[key]
    for i in range(6):
        flat[C[f"beta_{i}"]] = raw["kinetics"]["beta"][i]
        flat[C[f"lam_{i}"]] = raw["kinetics"]["decay"][i]
    raw["_derived"] = d
    return PlantConstants(raw=raw, flat=flat)


_DEFAULT = None


def default_constants() -> PlantConstants:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_constants()
    return _DEFAULT

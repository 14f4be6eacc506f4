"""Lumped-parameter emulator of the two-loop salt-cooled plant.

Point kinetics with prompt-jump power, six delayed groups, fuel/moderator/
coolant/xenon feedback and a rate-limited control rod; single-node loop
legs and a counterflow IHX; quadratic homologous pumps whose head drops as
1/K. Three PID loops close the plant: rod -> core power, primary pump ->
core outlet temperature, secondary pump -> core inlet temperature.

Every node update is an exact exponential relaxation over a sub-step, so
the scheme stays stable at the 5 s outer step.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from ._jit import njit
from . import constants as K
from .constants import PlantConstants, counterflow_effectiveness, default_constants, xenon_equilibrium
from .variables import (
    I_C1, I_DPP, I_DPS, I_MC, I_MPP, I_MPS, I_MS, I_MSG, I_NI, I_NP, I_NS, I_NXE,
    I_PCIN, I_PCOUT, I_PIPIN, I_PIPOUT, I_PISIN, I_PISOUT, I_PSGIN, I_PSGOUT,
    I_QHX, I_QRX, I_QSG, I_RHOC, I_RHOCR, I_RHOF, I_RHOM, I_T, I_TCIN, I_TCOUT,
    I_TIPIN, I_TIPOUT, I_TISIN, I_TISOUT, I_TSGIN, I_TSGOUT, I_ZCR, IDX, N_STATE, STATE_IDS,
)

# hidden (non-Table) emulator state
A_TF, A_TM = 0, 1
A_IROD, A_IPRI, A_ISEC = 2, 3, 4
A_EROD, A_EPRI, A_ESEC = 5, 6, 7
A_TBC = 8
A_FP, A_FS = 9, 10
A_WP, A_WS = 11, 12
A_SP = 13
N_AUX = 14


class PlantError(RuntimeError):
    """Raised when the emulator cannot advance."""


class PlantDivergenceError(PlantError):
    pass


class MaintenanceWindowError(PlantError):
    pass


@dataclass
class PidController:
    """Positional PID with output clamp and conditional-integration anti-windup."""

    kp: float
    ki: float = 0.0
    kd: float = 0.0
    out_min: float = -math.inf
    out_max: float = math.inf
    setpoint: float = 0.0
    integral: float = 0.0
    prev_error: float | None = None

    def update(self, measurement: float, dt: float, feedforward: float = 0.0) -> float:
        err = self.setpoint - measurement
        deriv = 0.0 if self.prev_error is None or dt <= 0 else (err - self.prev_error) / dt
        self.prev_error = err
        trial = feedforward + self.kp * err + self.ki * (self.integral + err * dt) + self.kd * deriv
        if self.out_min < trial < self.out_max or (trial >= self.out_max and err < 0) or (
            trial <= self.out_min and err > 0
        ):
            self.integral += err * dt
        out = feedforward + self.kp * err + self.ki * self.integral + self.kd * deriv
        return min(max(out, self.out_min), self.out_max)


@dataclass
class PumpActuator:
    """Quadratic homologous pump: fresh head a*n^2 - b*V^2, degraded by 1/K."""

    rated_head: float
    rated_flow: float  # m^3/s
    rated_speed: float  # RPM
    K: float = 1.0
    speed: float = 0.0
    shutoff_ratio: float = 1.3

    def __post_init__(self):
        if self.K < 1.0:
            raise ValueError("loss coefficient K must be >= 1.0")

    @property
    def a(self):
        return self.shutoff_ratio * self.rated_head / self.rated_speed**2

    @property
    def b(self):
        return (self.shutoff_ratio - 1.0) * self.rated_head / self.rated_flow**2

    def head(self, speed: float, flow: float) -> float:
        return (self.a * speed**2 - self.b * flow**2) / self.K

    def speed_for(self, head: float, flow: float) -> float:
        return math.sqrt(max(self.K * head + self.b * flow**2, 0.0) / self.a)


def primary_pump(constants: PlantConstants | None = None, K: float = 1.0) -> PumpActuator:
    c = constants or default_constants()
    pr = c.raw["primary"]
    return PumpActuator(pr["rated_head"], c["mdot_p0"] / c["rho_p"], pr["rated_speed"], K=K,
                        shutoff_ratio=pr["shutoff_ratio"])


def secondary_pump(constants: PlantConstants | None = None, K: float = 1.0) -> PumpActuator:
    c = constants or default_constants()
    se = c.raw["secondary"]
    return PumpActuator(se["rated_head"], se["rated_volume_flow"], se["rated_speed"], K=K,
                        shutoff_ratio=se["shutoff_ratio"])


@dataclass
class PlantState:
    """Table-level state ``x`` (42 entries) plus the emulator's hidden nodes."""

    x: np.ndarray
    aux: np.ndarray
    warning: bool = False
    events: list = field(default_factory=list)

    def __getitem__(self, name: str) -> float:
        return float(self.x[IDX[name]])

    @property
    def t(self) -> float:
        return float(self.x[I_T])

    @property
    def sg_boundary(self) -> float:
        return float(self.aux[A_TBC])

    def copy(self) -> "PlantState":
        return PlantState(self.x.copy(), self.aux.copy(), self.warning, list(self.events))

    def as_dict(self) -> dict:
        return {name: float(v) for name, v in zip(STATE_IDS, self.x)}


# --------------------------------------------------------------------------- kernels


@njit
def _relax(value, target, h, tau):
    return target + (value - target) * math.exp(-h / tau)


@njit
def _ihx_duty(t_hot_in, t_cold_in, mdot_p, mdot_s, c):
    cap_h = mdot_p * c[K.CP_P]
    cap_c = mdot_s * c[K.CP_S]
    if cap_h <= 0.0 or cap_c <= 0.0:
        return 0.0
    fp = mdot_p / c[K.MDOT_P0]
    fs = mdot_s / c[K.MDOT_S0]
    ua = c[K.UA0] * math.sqrt(fp * fs)
    cmin = min(cap_h, cap_c)
    cmax = max(cap_h, cap_c)
    cr = cmin / cmax
    ntu = ua / cmin
    if abs(1.0 - cr) < 1e-9:
        eps = ntu / (1.0 + ntu)
    else:
        e = math.exp(-ntu * (1.0 - cr))
        eps = (1.0 - e) / (1.0 - cr * e)
    return eps * cmin * (t_hot_in - t_cold_in)


@njit
def _fill_algebraic(x, aux, K_p, K_s, c):
    """Recompute quasi-static outputs (pressures, speeds, reactivities) from nodes."""
    mp = x[I_MPP]
    ms = x[I_MPS]
    x[I_MC] = mp
    x[I_MS] = ms
    x[I_MSG] = ms
    head_p = c[K.R_LOOP_P] * mp * mp
    head_s = c[K.R_LOOP_S] * ms * ms
    x[I_DPP] = head_p
    x[I_DPS] = head_s
    vp = mp / c[K.RHO_P]
    vs = ms / c[K.RHO_S]
    x[I_NP] = math.sqrt(max(K_p * head_p + c[K.B_PUMP_P] * vp * vp, 0.0) / c[K.A_PUMP_P])
    x[I_NS] = math.sqrt(max(K_s * head_s + c[K.B_PUMP_S] * vs * vs, 0.0) / c[K.A_PUMP_S])
    aux[A_WP] = K_p * head_p * vp / c[K.EFF_P]
    aux[A_WS] = K_s * head_s * vs / c[K.EFF_S]
    x[I_PCOUT] = c[K.P_REF_P]
    x[I_PCIN] = x[I_PCOUT] + c[K.SPLIT_CORE] * head_p
    x[I_PIPIN] = x[I_PCOUT] - c[K.SPLIT_HL_P] * head_p
    x[I_PIPOUT] = x[I_PIPIN] - c[K.SPLIT_IHX_P] * head_p
    x[I_PSGOUT] = c[K.P_REF_S]
    x[I_PISIN] = x[I_PSGOUT] + (1.0 - c[K.SPLIT_CL_S]) * head_s
    x[I_PISOUT] = x[I_PISIN] - c[K.SPLIT_IHX_S] * head_s
    x[I_PSGIN] = x[I_PISOUT] - c[K.SPLIT_HL_S] * head_s
    tcavg = 0.5 * (x[I_TCIN] + x[I_TCOUT])
    x[I_RHOF] = c[K.ALPHA_F] * (aux[A_TF] - c[K.TF_REF])
    x[I_RHOM] = c[K.ALPHA_M] * (aux[A_TM] - c[K.TM_REF])
    x[I_RHOC] = c[K.ALPHA_C] * (tcavg - c[K.TCAVG_REF])
    x[I_RHOCR] = c[K.ROD_WORTH] * (x[I_ZCR] - c[K.ROD_REF])
    x[I_TSGOUT] = aux[A_TBC]
    x[I_QSG] = ms * c[K.CP_S] * (x[I_TSGIN] - x[I_TSGOUT])


@njit
def _substep(x, aux, setpoint, h, K_p, K_s, c):
    q0 = c[K.FULL_POWER]
    lam_gen = c[K.GEN_TIME]
    # --- neutronics (prompt jump)
    beta_tot = 0.0
    src = 0.0
    for g in range(6):
        beta_tot += c[K.BETA_0 + g]
        src += c[K.LAM_0 + g] * x[I_C1 + g]
    rho = x[I_RHOCR] + x[I_RHOF] + x[I_RHOM] + x[I_RHOC] - x[I_NXE] + c[K.XE_BIAS]
    if rho > 0.9 * beta_tot:
        rho = 0.9 * beta_tot
    p_rel = lam_gen * src / (beta_tot - rho)
    for g in range(6):
        lam = c[K.LAM_0 + g]
        eq = c[K.BETA_0 + g] * p_rel / (lam * lam_gen)
        x[I_C1 + g] = eq + (x[I_C1 + g] - eq) * math.exp(-lam * h)
    x[I_QRX] = p_rel * q0

    # --- xenon / iodine
    phi = c[K.FLUX0] * p_rel
    sphi = c[K.SIG_X] * phi
    prod = sphi / c[K.NU]
    n_i = x[I_NI]
    eq_i = c[K.GAM_I] * prod / c[K.LAM_I]
    x[I_NI] = eq_i + (n_i - eq_i) * math.exp(-c[K.LAM_I] * h)
    rem = c[K.LAM_X] + sphi
    eq_x = (c[K.GAM_X] * prod + c[K.LAM_I] * n_i) / rem
    x[I_NXE] = eq_x + (x[I_NXE] - eq_x) * math.exp(-rem * h)

    # --- fuel, moderator, core coolant
    tcavg = 0.5 * (x[I_TCIN] + x[I_TCOUT])
    r_f = c[K.R_FUEL]
    q_fuel = c[K.FUEL_FRAC] * p_rel * q0
    aux[A_TF] = _relax(aux[A_TF], tcavg + q_fuel * r_f, h, c[K.C_FUEL] * r_f)
    g_m = c[K.G_MOD]
    q_mod = (1.0 - c[K.FUEL_FRAC]) * p_rel * q0
    aux[A_TM] = _relax(aux[A_TM], tcavg + q_mod / g_m, h, c[K.C_MOD] / g_m)
    q_cool = (aux[A_TF] - tcavg) / r_f + g_m * (aux[A_TM] - tcavg)

    mp = x[I_MPP]
    ms = x[I_MPS]
    cap_p = max(mp * c[K.CP_P], 1.0)
    cap_s = max(ms * c[K.CP_S], 1.0)
    x[I_TCOUT] = _relax(x[I_TCOUT], x[I_TCIN] + q_cool / cap_p, h, c[K.C_CORE] / cap_p)
    x[I_TIPIN] = _relax(x[I_TIPIN], x[I_TCOUT], h, c[K.C_LEG_P] / cap_p)
    q_hx = _ihx_duty(x[I_TIPIN], x[I_TISIN], mp, ms, c)
    x[I_QHX] = q_hx
    x[I_TIPOUT] = _relax(x[I_TIPOUT], x[I_TIPIN] - q_hx / cap_p, h, c[K.C_IHX_P] / cap_p)
    x[I_TISOUT] = _relax(x[I_TISOUT], x[I_TISIN] + q_hx / cap_s, h, c[K.C_IHX_S] / cap_s)
    x[I_TCIN] = _relax(x[I_TCIN], x[I_TIPOUT], h, c[K.C_LEG_P] / cap_p)
    x[I_TSGIN] = _relax(x[I_TSGIN], x[I_TISOUT], h, c[K.C_LEG_S] / cap_s)
    x[I_TISIN] = _relax(x[I_TISIN], aux[A_TBC], h, c[K.C_LEG_S] / cap_s)

    # --- controller 1: rod velocity from relative power error
    vmax = c[K.ROD_SPEED_MAX]
    e_rod = (setpoint - x[I_QRX]) / q0
    d_rod = (e_rod - aux[A_EROD]) / h
    v = c[K.ROD_KP] * e_rod + c[K.ROD_KI] * (aux[A_IROD] + e_rod * h) + c[K.ROD_KD] * d_rod
    if -vmax < v < vmax:
        aux[A_IROD] += e_rod * h
    v = min(max(v, -vmax), vmax)
    z = x[I_ZCR] + v * h
    x[I_ZCR] = min(max(z, c[K.ROD_MIN]), c[K.ROD_MAX])
    aux[A_EROD] = e_rod

    # --- controllers 2 and 3: flow demand = measured-power feedforward + PID trim
    ff = x[I_QRX] / q0
    fmin = c[K.FLOW_MIN]
    fmax = c[K.FLOW_MAX]
    e_p = x[I_TCOUT] - c[K.T_CORE_OUT]
    d_p = (e_p - aux[A_EPRI]) / h
    u_p = ff + c[K.PRI_KP] * e_p + c[K.PRI_KI] * (aux[A_IPRI] + e_p * h) + c[K.PRI_KD] * d_p
    if fmin < u_p < fmax:
        aux[A_IPRI] += e_p * h
    aux[A_FP] = min(max(u_p, fmin), fmax)
    aux[A_EPRI] = e_p
    e_s = x[I_TCIN] - c[K.T_CORE_IN]
    d_s = (e_s - aux[A_ESEC]) / h
    u_s = ff + c[K.SEC_KP] * e_s + c[K.SEC_KI] * (aux[A_ISEC] + e_s * h) + c[K.SEC_KD] * d_s
    if fmin < u_s < fmax:
        aux[A_ISEC] += e_s * h
    aux[A_FS] = min(max(u_s, fmin), fmax)
    aux[A_ESEC] = e_s

    # --- pumps: flow follows the demanded fraction through the pump lag
    tau = c[K.PUMP_TAU]
    x[I_MPP] = _relax(mp, aux[A_FP] * c[K.MDOT_P0], h, tau)
    x[I_MPS] = _relax(ms, aux[A_FS] * c[K.MDOT_S0], h, tau)
    x[I_T] += h
    _fill_algebraic(x, aux, K_p, K_s, c)


@njit
def _advance(x, aux, setpoint, dt, K_p, K_s, h_nominal, c):
    """Advance one outer step; returns False if any entry went non-finite."""
    n_sub = int(math.ceil(dt / h_nominal - 1e-9))
    if n_sub < 1:
        n_sub = 1
    h = dt / n_sub
    t0 = x[I_T]
    aux[A_SP] = setpoint
    for _ in range(n_sub):
        _substep(x, aux, setpoint, h, K_p, K_s, c)
    x[I_T] = t0 + dt
    for i in range(x.shape[0]):
        if not math.isfinite(x[i]):
            return False
    for i in range(aux.shape[0]):
        if not math.isfinite(aux[i]):
            return False
    return True


@njit
def _simulate(x, aux, setpoints, dt, K_p, K_s, h_nominal, c, out):
    """Run ``len(setpoints)`` outer steps, writing each state into ``out``."""
    for k in range(setpoints.shape[0]):
        ok = _advance(x, aux, setpoints[k], dt, K_p, K_s, h_nominal, c)
        if not ok:
            return k
        out[k, :] = x
    return setpoints.shape[0]


# --------------------------------------------------------------------------- API


def steady_state(power_fraction: float = 1.0, K_p: float = 1.0, K_s: float = 1.0,
                 sg_boundary: float | None = None, constants: PlantConstants | None = None,
                 t: float = 0.0) -> PlantState:
    """Closed-form steady operating point at ``power_fraction`` of full power.

    With the nominal SG boundary this is the exact fixed point of the emulator;
    for a shifted boundary the secondary flow is found by bisection.
    """
    c = constants or default_constants()
    cf = c.flat
    raw = c.raw
    p = float(power_fraction)
    if not 0.0 < p <= 1.2:
        raise ValueError("power_fraction must lie in (0, 1.2]")
    t_bc = raw["plant"]["t_sg_out"] if sg_boundary is None else float(sg_boundary)
    t_out = cf[K.T_CORE_OUT]
    t_in = cf[K.T_CORE_IN]
    q = p * cf[K.FULL_POWER]
    mp = p * cf[K.MDOT_P0]
    lo, hi = 1e-4, 5.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        duty = _ihx_duty(t_out, t_bc, mp, mid * cf[K.MDOT_S0], cf)
        if duty < q:
            lo = mid
        else:
            hi = mid
    fs = 0.5 * (lo + hi)
    ms = fs * cf[K.MDOT_S0]

    x = np.zeros(N_STATE)
    aux = np.zeros(N_AUX)
    x[I_T] = t
    x[I_TCOUT] = t_out
    x[I_TCIN] = t_in
    x[I_TIPIN] = t_out
    x[I_TIPOUT] = t_in
    x[I_TISIN] = t_bc
    x[I_TISOUT] = t_bc + q / (ms * cf[K.CP_S])
    x[I_TSGIN] = x[I_TISOUT]
    x[I_MPP] = mp
    x[I_MPS] = ms
    x[I_QRX] = q
    x[I_QHX] = q
    n_i, n_xe = xenon_equilibrium(p, raw["xenon"])
    x[I_NI] = n_i
    x[I_NXE] = n_xe
    for g in range(6):
        x[I_C1 + g] = cf[K.BETA_0 + g] * p / (cf[K.LAM_0 + g] * cf[K.GEN_TIME])
    tcavg = 0.5 * (t_in + t_out)
    aux[A_TF] = tcavg + cf[K.FUEL_FRAC] * q * cf[K.R_FUEL]
    aux[A_TM] = tcavg + (1.0 - cf[K.FUEL_FRAC]) * q / cf[K.G_MOD]
    aux[A_TBC] = t_bc
    aux[A_FP] = p
    aux[A_FS] = fs
    aux[A_SP] = q
    # integral states carry the steady trim so the loops start settled
    aux[A_IPRI] = 0.0
    aux[A_ISEC] = (fs - p) / cf[K.SEC_KI] if cf[K.SEC_KI] > 0 else 0.0
    rho_fb = (cf[K.ALPHA_F] * (aux[A_TF] - cf[K.TF_REF])
              + cf[K.ALPHA_M] * (aux[A_TM] - cf[K.TM_REF]) - n_xe + cf[K.XE_BIAS])
    x[I_ZCR] = cf[K.ROD_REF] - rho_fb / cf[K.ROD_WORTH]
    _fill_algebraic(x, aux, K_p, K_s, cf)
    return PlantState(x, aux)


def commissioning_state(constants: PlantConstants | None = None) -> PlantState:
    """Full-power steady state with fresh pumps."""
    return steady_state(1.0, constants=constants)


def _check_setpoint(setpoint: float, c: PlantConstants):
    if not (math.isfinite(setpoint) and 0.0 <= setpoint <= c.full_power):
        raise ValueError(f"setpoint {setpoint!r} W outside [0, {c.full_power:g}] W")


def step_plant(state: PlantState, setpoint: float, dt: float = 5.0, K_p: float = 1.0,
               K_s: float = 1.0, constants: PlantConstants | None = None) -> PlantState:
    """Advance the emulator by ``dt`` seconds toward core-power ``setpoint`` (W)."""
    c = constants or default_constants()
    if not dt > 0:
        raise ValueError("dt must be positive")
    _check_setpoint(setpoint, c)
    h = c.raw["plant"]["substep"]
    for _ in range(c.raw["plant"]["max_halvings"] + 1):
        x = state.x.copy()
        aux = state.aux.copy()
        if _advance(x, aux, float(setpoint), float(dt), float(K_p), float(K_s), h, c.flat):
            return PlantState(x, aux, state.warning, state.events)
        h *= 0.5
    raise PlantDivergenceError(f"emulator diverged at t={state.t:.1f} s after sub-step halving")


def simulate(state: PlantState, setpoints, dt: float = 5.0, K_p: float = 1.0, K_s: float = 1.0,
             constants: PlantConstants | None = None):
    """Step through a setpoint sequence; returns (final state, trajectory array)."""
    c = constants or default_constants()
    sp = np.ascontiguousarray(setpoints, dtype=float)
    if not dt > 0:
        raise ValueError("dt must be positive")
    if sp.size and (sp.min() < 0 or sp.max() > c.full_power or not np.all(np.isfinite(sp))):
        raise ValueError("setpoints outside the physical range")
    out = np.empty((sp.shape[0], N_STATE))
    x = state.x.copy()
    aux = state.aux.copy()
    done = _simulate(x, aux, sp, float(dt), float(K_p), float(K_s), c.raw["plant"]["substep"], c.flat, out)
    if done < sp.shape[0]:
        # fall back to the halving path from the last good state
        good = PlantState(out[done - 1].copy() if done else state.x.copy(), aux, state.warning)
        raise PlantDivergenceError(f"emulator diverged at step {done} (t={good.t:.1f} s)")
    return PlantState(x, aux, state.warning, state.events), out


def measure(state: PlantState | np.ndarray, observed, gamma=None, rng: np.random.Generator | None = None):
    """Return the observed entries of the state plus one N(0, gamma) draw."""
    observed = list(observed)
    if not observed:
        raise ValueError("observation list is empty")
    x = state.x if isinstance(state, PlantState) else np.asarray(state)
    idx = [IDX[name] if name in IDX else None for name in observed]
    if any(i is None for i in idx):
        bad = [n for n, i in zip(observed, idx) if i is None]
        raise KeyError(f"unknown variable id(s): {bad}")
    d = x[np.asarray(idx)].astype(float)
    if gamma is None:
        return d
    g = np.atleast_2d(np.asarray(gamma, dtype=float))
    if g.shape != (len(idx), len(idx)):
        raise ValueError("gamma must be square with one row per observed variable")
    if not np.any(g):
        return d
    if rng is None:
        raise ValueError("a random generator is required for noisy measurements")
    return d + rng.multivariate_normal(np.zeros(len(idx)), g, method="cholesky")


def inject_sg_shock(state: PlantState, delta_t: float, constants: PlantConstants | None = None) -> PlantState:
    """Move the SG exit boundary temperature to nominal + ``delta_t`` (K)."""
    c = constants or default_constants()
    nominal = c.raw["plant"]["t_sg_out"]
    if delta_t == 0 and state.aux[A_TBC] == nominal:
        return state
    out = state.copy()
    out.aux[A_TBC] = nominal + float(delta_t)
    out.x[I_TSGOUT] = out.aux[A_TBC]
    if abs(delta_t) > c.raw["plant"]["shock_envelope"]:
        out.warning = True
        warnings.warn(f"SG boundary change {delta_t:+.1f} K is outside the trained envelope",
                      RuntimeWarning, stacklevel=2)
    out.events.append(("sg_shock", out.t, float(delta_t)))
    return out


def is_boundary(t: float, period: float, tol: float = 1e-6) -> bool:
    r = math.fmod(t, period)
    return r < tol or period - r < tol


def apply_maintenance(pump: PumpActuator, at_time: float, delta_period: float) -> PumpActuator:
    """Restore a pump to its commissioning loss coefficient at a planning boundary."""
    if not is_boundary(at_time, delta_period):
        raise MaintenanceWindowError(
            f"maintenance requested at t={at_time:g} s, not on a {delta_period:g} s boundary")
    return replace(pump, K=1.0)


def pump_power(state: PlantState) -> tuple[float, float]:
    """Electrical pump powers (W) the emulator is currently drawing."""
    return float(state.aux[A_WP]), float(state.aux[A_WS])


def write_trajectory_csv(path, times_states: np.ndarray):
    """CSV with one column per state variable; header row of ids, time first."""
    np.savetxt(path, times_states, delimiter=",", header=",".join(STATE_IDS), comments="", fmt="%.10g")

"""Closed-loop run: plant, twin, governor, operator and pump health on four clocks."""
from __future__ import annotations

import datetime as _dt
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..constants import default_constants
from ..demand import daily_load_follow, hourly_profile, seasonal_profile
from ..enkf import (AssimilationError, AssimilationLog, NoiseSpec, ObservationModel, augmented_mean,
                    block_mask, init_ensemble, predict_many, update, write_theta)
from ..governor import Constraint, ConstraintSet, GovernorInfeasibleError, govern
from ..health import (PumpHealth, health_index, new_pump_life, degrade_series, primary_degradation,
                      pump_required_power, secondary_degradation)
from ..models import default_net
from ..operator import RewardWeights, compress_surrogate, plan_period, SamplingPlan
from ..plant import PlantDivergenceError, inject_sg_shock, measure, simulate, steady_state, step_plant
from ..surrogate.net import SurrogateNet
from ..variables import IDX, STATE_IDS
from .config import ScenarioConfig

STATE_COLS = [v for v in STATE_IDS if v != "t"]


class ScenarioHalted(RuntimeError):
    """An alarm fired while the scenario was configured to halt."""


@dataclass
class RunLog:
    config: dict
    series: dict  # column -> array, "t" first
    assimilation: AssimilationLog
    governor: list = field(default_factory=list)
    plans: list = field(default_factory=list)
    events: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    ensemble: object = None  # final ensemble, for inspection
    model_report: dict = field(default_factory=dict)  # compressed model fit, when the operator ran

    @property
    def empty(self) -> bool:
        return not self.series or len(self.series.get("t", ())) == 0

    def column(self, name) -> np.ndarray:
        return self.series[name]

    def hours(self) -> np.ndarray:
        return self.series["t"] / 3600.0


def month_boundaries(start_date: str, n_steps: int, dt: float, extra_months: int = 0) -> list:
    """Step indices of calendar month starts from the run start (inclusive of 0)."""
    d0 = _dt.date.fromisoformat(start_date)
    out = [0]
    y, m = d0.year, d0.month
    limit = None
    while True:
        m += 1
        if m > 12:
            y, m = y + 1, 1
        k = int(round((_dt.date(y, m, 1) - d0).days * 86400 / dt))
        if k >= n_steps:
            if limit is None:
                limit = extra_months
            if limit <= 0:
                out.append(k)
                break
            limit -= 1
        out.append(k)
    return out


def planning_boundaries(cfg: ScenarioConfig, extra: int = 0) -> list:
    ts = cfg.timescales
    n = cfg.n_steps
    if ts.delta == "month":
        return month_boundaries(cfg.start_date, n, ts.dt, extra)
    last = n + extra * ts.delta
    return list(range(0, last + 1, ts.delta)) if last % ts.delta == 0 else list(range(0, last + ts.delta, ts.delta))


def schedule(cfg: ScenarioConfig) -> dict:
    """Step indices at which each loop fires."""
    ts = cfg.timescales
    n = cfg.n_steps
    gov = list(range(ts.gamma_offset, n, ts.gamma))
    first = ts.beta_offset if ts.beta_offset > 0 else ts.beta
    assim = list(range(first, n + 1, ts.beta))
    plans = [b for b in planning_boundaries(cfg) if b < n]
    shocks = {int(round(s["time_hours"] * 3600.0 / ts.dt)): float(s["delta_T"]) for s in cfg.shocks}
    return {"governor": gov, "assimilation": assim, "plans": plans, "shocks": shocks}


def make_demand(cfg: ScenarioConfig, n_hours: int, rng: np.random.Generator) -> np.ndarray:
    """Hourly demand as fractions of full power."""
    d = cfg.demand
    if d.kind == "load_follow":
        return daily_load_follow(n_hours, rng, d.low, d.high, d.noise)
    if d.kind == "seasonal":
        return seasonal_profile(n_hours, rng, _dt.date.fromisoformat(cfg.start_date).month, d.low, d.high,
                                noise=d.noise)
    if d.kind == "random_walk":
        return hourly_profile(n_hours, rng, d.low, d.high, start=cfg.start_power)
    if d.kind == "steps":
        v = np.asarray(d.values, dtype=float)
    else:
        v = np.loadtxt(d.path, delimiter=",", ndmin=1)
    if v.size < n_hours:
        v = np.concatenate([v, np.full(n_hours - v.size, v[-1])])
    return np.clip(v[:n_hours], d.low, d.high)


def resolve_net(cfg: ScenarioConfig) -> SurrogateNet:
    if cfg.surrogate in ("original", "shock"):
        return default_net(cfg.surrogate)
    return SurrogateNet.load(cfg.surrogate)


def state_noise_scale(c) -> np.ndarray:
    """Per-variable noise unit: full-power magnitude or the 50-100 % swing, whichever is larger.

    Variables that sit at zero at full power (reactivities) take their swing,
    with a 1e-3 floor; the clock gets no noise.
    """
    hi = steady_state(1.0, constants=c).x
    lo = steady_state(0.5, constants=c).x
    s = np.maximum(np.abs(hi), np.abs(hi - lo))
    s = np.where(s < 1e-9, 1e-3, s)
    s[IDX["t"]] = 0.0
    return s


def parameter_noise_scale(theta_a) -> np.ndarray:
    """Coefficient magnitudes, so parameter variances are relative."""
    a = np.abs(np.asarray(theta_a, dtype=float))
    floor = 1e-12 * max(1.0, float(a.max())) if a.size else 1e-12
    return np.maximum(a, floor)


def _constraints(cfg: ScenarioConfig) -> ConstraintSet:
    if not cfg.governor.constraints:
        return ConstraintSet()
    sense = {"min": ">=", "max": "<="}
    return ConstraintSet(tuple(Constraint(c["var"], float(c["bound"]), sense[c["direction"]],
                                          float(c.get("buffer", 0.0)))
                               for c in cfg.governor.constraints))


def _advance_plant(plant, setpoint, n, K_p, K_s, c):
    try:
        return simulate(plant, np.full(n, setpoint), K_p=K_p, K_s=K_s, constants=c)
    except PlantDivergenceError:
        traj = np.empty((n, len(STATE_IDS)))
        for i in range(n):
            plant = step_plant(plant, setpoint, K_p=K_p, K_s=K_s, constants=c)
            traj[i] = plant.x
        return plant, traj


class _Recorder:
    def __init__(self, every: int):
        self.every = every
        self.chunks = []

    def add(self, steps, truth, twin, target, setpoint, K_p, K_s, shutdown):
        sel = np.flatnonzero(steps % self.every == 0)
        if not sel.size:
            return
        tr = truth[sel]
        kp = np.broadcast_to(K_p, steps.shape)[sel]
        ks = np.broadcast_to(K_s, steps.shape)[sel]
        chunk = {"t": tr[:, IDX["t"]].copy()}
        for v in STATE_COLS:
            chunk[v] = tr[:, IDX[v]]
            chunk["twin_" + v] = twin[sel, IDX[v]]
        if shutdown:
            qp = qs = np.zeros(sel.size)
        else:
            qp = pump_required_power(tr, kp, "p")[1]
            qs = pump_required_power(tr, ks, "s")[1]
        chunk.update({"Q_RX_T": np.full(sel.size, target), "Q_RX_O": np.full(sel.size, setpoint),
                      "K_p": kp, "K_s": ks, "eta_p": health_index(kp), "eta_s": health_index(ks),
                      "Q_PD_p": qp, "Q_PD_s": qs, "shutdown": np.full(sel.size, float(shutdown))})
        self.chunks.append(chunk)

    def series(self) -> dict:
        if not self.chunks:
            return {}
        keys = ["t"] + sorted(k for k in self.chunks[0] if k != "t")
        return {k: np.concatenate([c[k] for c in self.chunks]) for k in keys}


def run_scenario(cfg: ScenarioConfig, net: SurrogateNet | None = None, transition_model=None) -> RunLog:
    """Run the closed loop for ``cfg.duration_hours`` and return the full log."""
    t_start = time.perf_counter()
    c = default_constants()
    ts = cfg.timescales
    dt = ts.dt
    n_total = cfg.n_steps
    if n_total < 1:
        raise ValueError("duration shorter than one step")
    steps_per_hour = int(round(3600.0 / dt))
    full = c.full_power
    seeds = np.random.SeedSequence(cfg.seed).spawn(6)
    rng_demand, rng_meas, rng_filter, rng_hp, rng_hs, rng_op = (np.random.default_rng(s) for s in seeds)
    net = net or resolve_net(cfg)
    sched = schedule(cfg)
    gov_set, assim_set, plan_set = set(sched["governor"]), set(sched["assimilation"]), set(sched["plans"])
    shock_at = sched["shocks"]
    all_bounds = planning_boundaries(cfg, cfg.operator.reasoning_intervals)
    n_hours = int(math.ceil(all_bounds[-1] / steps_per_hour)) + 1 if cfg.operator.enabled else \
        int(math.ceil(n_total / steps_per_hour)) + 1
    demand = make_demand(cfg, max(n_hours, int(math.ceil(n_total / steps_per_hour)) + 1), rng_demand) * full
    target_hourly = demand.copy()

    pp = primary_degradation(**cfg.pumps.primary)
    ps = secondary_degradation(**cfg.pumps.secondary)
    health_p = new_pump_life(pp, rng_hp, K=cfg.pumps.K_p0)
    health_s = new_pump_life(ps, rng_hs, K=cfg.pumps.K_s0)
    plant = steady_state(cfg.start_power, health_p.K, health_s.K, constants=c)

    # twin
    fc = cfg.filter
    theta_ids = list(net.metadata.get("theta_A", [])) if fc.theta_A == "auto" else list(fc.theta_A)
    state_scale = state_noise_scale(c)
    theta_idx = net.theta_index(theta_ids) if theta_ids else np.zeros(0, dtype=np.int64)
    noise = NoiseSpec(fc.sigma, fc.sigma_tau, fc.c0_state, fc.c0_param, state_scale=state_scale,
                      param_scale=parameter_noise_scale(net.theta()[theta_idx]))
    obs = ObservationModel(tuple(fc.observations), len(theta_ids))
    obs_idx = [IDX[o] for o in fc.observations]
    g_rel = np.broadcast_to(np.asarray(fc.gamma, dtype=float), (len(obs_idx),))
    gamma_raw = np.diag(g_rel * state_scale[obs_idx] ** 2)
    mask = block_mask(net, obs, len(theta_ids)) if fc.localization == "block" else None

    def fresh_ensemble(x):
        m = augmented_mean(x, x, net.theta()[theta_idx])
        return init_ensemble(m, noise, fc.n_members, rng_filter, theta_ids, net)

    ens = fresh_ensemble(plant.x)
    alog = AssimilationLog(tuple(theta_ids), tuple(fc.observations))
    alog.initial_var_obs = [float(v) for v in ens.X[ens.state_rows][obs_idx].var(axis=1, ddof=1)]
    constraints = _constraints(cfg)
    rec = _Recorder(cfg.output.log_every)
    events, gov_log, plans = [], [], []

    def alarm(kind, t, **info):
        events.append({"t": float(t), "event": "alarm", "kind": kind, **info})
        if cfg.alarms == "halt":
            raise ScenarioHalted(f"{kind} at t={t:g} s: {info}")

    model = None
    weights = None
    if cfg.operator.enabled:
        model = transition_model or compress_surrogate(net, (replace(pp, sigma_i=0.0), replace(ps, sigma_i=0.0)),
                                                       SamplingPlan(n_samples=cfg.operator.n_samples,
                                                                    seed=int(rng_op.integers(2**31))))
        weights = RewardWeights(**cfg.operator.weights)

    x0 = plant.x.copy()
    rec.add(np.array([0]), x0[None], ens.state_mean()[None], target_hourly[0], x0[IDX["Q_RX"]],
            health_p.K, health_s.K, False)
    setpoint = float(plant.x[IDX["Q_RX"]])
    shutdown = False
    events_at = sorted(gov_set | assim_set | plan_set | set(shock_at) | {n_total})
    ev_pos = 0
    k = 0
    timing = {"plant": 0.0, "twin": 0.0, "governor": 0.0, "operator": 0.0, "assimilation": 0.0}
    while k < n_total:
        t_now = k * dt
        if k in plan_set:
            t0 = time.perf_counter()
            if cfg.operator.enabled:
                i = all_bounds.index(k)
                rel = [b - k for b in all_bounds[i:i + cfg.operator.reasoning_intervals + 1]]
                h0 = k // steps_per_hour
                h_end = h0 + rel[-1] // steps_per_hour
                applied = rel[1] // steps_per_hour
                allowed = cfg.operator.maintenance_at_start or k > 0
                plan = plan_period(demand[h0:h_end], (health_p.K, health_s.K), model, weights,
                                   applied_hours=applied, boundaries=[r // steps_per_hour for r in rel[:-1]],
                                   power=0.0 if shutdown else float(plant.x[IDX["Q_RX"]]),
                                   maintenance_allowed_now=allowed)
                plans.append({"t": t_now, "K_p": health_p.K, "K_s": health_s.K, **json.loads(plan.to_json())})
                events.append({"t": t_now, "event": "plan", "shutdown": plan.shutdown, "maintain": plan.maintain,
                               "fallback": plan.fallback, "forced": plan.forced})
                target_hourly[h0:h0 + applied] = plan.targets
                if plan.shutdown:
                    if plan.maintain["p"]:
                        health_p = new_pump_life(pp, rng_hp)
                        events.append({"t": t_now, "event": "maintenance", "pump": "primary"})
                    if plan.maintain["s"]:
                        health_s = new_pump_life(ps, rng_hs)
                        events.append({"t": t_now, "event": "maintenance", "pump": "secondary"})
                    shutdown = True
                    events.append({"t": t_now, "event": "shutdown"})
                elif shutdown:
                    shutdown = False
                    p0 = float(plan.targets[0])
                    plant = steady_state(p0 / full, health_p.K, health_s.K, constants=c, t=t_now)
                    ens = fresh_ensemble(plant.x)
                    setpoint = p0
                    events.append({"t": t_now, "event": "restart", "power": p0})
            else:
                i = all_bounds.index(k)
                h0, h1 = k // steps_per_hour, max(all_bounds[i + 1] // steps_per_hour, k // steps_per_hour + 1)
                plans.append({"t": t_now, "targets_W": [float(x) for x in target_hourly[h0:h1]],
                              "maintain": {"p": False, "s": False}, "shutdown": False})
            timing["operator"] += time.perf_counter() - t0
        if k in shock_at and not shutdown:
            plant = inject_sg_shock(plant, shock_at[k], c)
            events.append({"t": t_now, "event": "sg_shock", "delta_T": shock_at[k]})
        hour = min(k // steps_per_hour, target_hourly.size - 1)
        target = float(target_hourly[hour])
        if k in gov_set and not shutdown:
            t0 = time.perf_counter()
            prev = setpoint
            if cfg.governor.enabled:
                m = ens.state_mean()
                mp = ens.X[ens.prev_rows].mean(axis=1)
                cons = constraints
                if cfg.governor.spread_factor > 0:
                    sd = ens.X[ens.state_rows].std(axis=1, ddof=1)
                    cons = constraints.with_spread_buffers({cc.var: sd[IDX[cc.var]] for cc in constraints},
                                                           cfg.governor.spread_factor)
                try:
                    dec = govern(target, prev, net, (mp, m), cons, cfg.governor.horizon, health_p.K, health_s.K,
                                 tol=cfg.governor.tol, full_power=full)
                    setpoint, kappa, binding, ev, alarmed = dec.setpoint, dec.kappa, dec.binding, dec.evaluations, False
                except GovernorInfeasibleError as exc:
                    setpoint, kappa, binding, ev, alarmed = prev, 0.0, exc.decision.binding, exc.decision.evaluations, True
                gov_log.append({"t": t_now, "target": target, "previous": prev, "setpoint": setpoint,
                                "kappa": kappa, "binding": binding or "", "evaluations": ev, "alarm": alarmed})
                if alarmed:
                    alarm("governor_infeasible", t_now, binding=binding)
            else:
                setpoint = target
                gov_log.append({"t": t_now, "target": target, "previous": prev, "setpoint": setpoint,
                                "kappa": 1.0, "binding": "", "evaluations": 0, "alarm": False})
            timing["governor"] += time.perf_counter() - t0
        while events_at[ev_pos] <= k:
            ev_pos += 1
        nxt = events_at[ev_pos]
        n = nxt - k
        steps = np.arange(k + 1, nxt + 1)
        if shutdown:
            truth = np.full((n, len(STATE_IDS)), np.nan)
            truth[:, IDX["t"]] = steps * dt
            truth[:, IDX["Q_RX"]] = 0.0
            rec.add(steps, truth, np.full_like(truth, np.nan), 0.0, 0.0, health_p.K, health_s.K, True)
            k = nxt
            continue
        t0 = time.perf_counter()
        v_prev_p = plant.x[IDX["m_P_p"]] / c["rho_p"]
        v_prev_s = plant.x[IDX["m_P_s"]] / c["rho_s"]
        plant, truth = _advance_plant(plant, setpoint, n, health_p.K, health_s.K, c)
        health_p, kp_series = degrade_series(health_p, truth[:, IDX["m_P_p"]] / c["rho_p"], pp, rng_hp, v_prev_p)
        health_s, ks_series = degrade_series(health_s, truth[:, IDX["m_P_s"]] / c["rho_s"], ps, rng_hs, v_prev_s)
        timing["plant"] += time.perf_counter() - t0
        t0 = time.perf_counter()
        ens, twin_means = predict_many(ens, net, np.full(n, setpoint), noise, rng_filter, health_p.K, health_s.K,
                                       fc.inflation)
        timing["twin"] += time.perf_counter() - t0
        rec.add(steps, truth, twin_means, target, setpoint, kp_series, ks_series, False)
        k = nxt
        if k in assim_set and fc.enabled:
            t0 = time.perf_counter()
            d = measure(plant, fc.observations, gamma_raw, rng_meas)
            prior = ens.X[ens.state_rows][obs_idx]
            try:
                post = update(ens, d, obs, gamma_raw, rng_filter, innovation=fc.innovation, mask=mask,
                              inflation=fc.prior_inflation)
                ens = post
                net = write_theta(net, ens)
                alog.record(k * dt, ens, d, prior.var(axis=1, ddof=1), prior.mean(axis=1))
            except AssimilationError as exc:
                alarm("assimilation", k * dt, message=str(exc))
            timing["assimilation"] += time.perf_counter() - t0
    for e in ens.events:
        events.append({"t": float(e.get("t", 0.0)), **{k2: v for k2, v in e.items() if k2 != "t"}})
    events.sort(key=lambda e: e["t"])
    timing["total"] = time.perf_counter() - t_start
    return RunLog(cfg.to_dict(), rec.series(), alog, gov_log, plans, events, timing, ens,
                  dict(model.report) if model is not None else {})

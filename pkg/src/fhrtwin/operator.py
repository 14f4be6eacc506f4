"""Health-aware supervisory planning on an hourly compressed model.

The fine-scale surrogate plus the pump degradation law are condensed into a
smooth map (start power, target) -> (end power, loss-coefficient increments).
Planning chooses hourly targets by exact dynamic programming on a power grid
and maintenance flags by a cross-entropy search; both are wrapped in an agent
with an observe/act contract so other policies can be dropped in.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from .health import K_ZERO, DegradationParams, degrade_series, PumpHealth, primary_degradation, secondary_degradation
from .plant import steady_state
from .surrogate.net import SurrogateNet, rollout
from .variables import IDX

FULL_POWER = 280e6
SCORE_REF = 14e6
ETA_MIN = 0.2


def transition_score(start: float, target: float, p_ref: float = SCORE_REF):
    """exp(-|target - start| / p_ref); 1 for no move, falling with step size."""
    return np.exp(-np.abs(np.asarray(target, dtype=float) - np.asarray(start, dtype=float)) / p_ref)


def maintenance_guard(eta_trajectory, eta_min: float = ETA_MIN) -> bool:
    """Maintain iff the predicted minimum health index reaches the floor (inclusive)."""
    eta = np.asarray(eta_trajectory, dtype=float)
    return bool(eta.size and eta.min() <= eta_min)


def _features(start, target):
    s, t = np.broadcast_arrays(np.asarray(start, dtype=float) / FULL_POWER, np.asarray(target, dtype=float) / FULL_POWER)
    dv = t - s
    return np.stack([np.ones_like(s), s, t, s * s, t * t, s * t, np.abs(dv), dv * dv, np.abs(dv) * s], axis=-1)


@dataclass
class HourlyTransitionModel:
    """(target, start, K_p, K_s) -> (end power, K_p', K_s', transition score)."""

    coef_end: np.ndarray
    coef_dkp: np.ndarray
    coef_dks: np.ndarray
    report: dict = field(default_factory=dict)

    def predict(self, target, start, K_p, K_s):
        F = _features(start, target)
        end = (F @ self.coef_end) * FULL_POWER
        dkp = np.maximum(F @ self.coef_dkp, 0.0)
        dks = np.maximum(F @ self.coef_dks, 0.0)
        return end, np.asarray(K_p) + dkp, np.asarray(K_s) + dks, transition_score(start, target)

    def increments(self, start, target):
        F = _features(start, target)
        return np.maximum(F @ self.coef_dkp, 0.0), np.maximum(F @ self.coef_dks, 0.0)

    def to_dict(self):
        return {"coef_end": self.coef_end.tolist(), "coef_dkp": self.coef_dkp.tolist(),
                "coef_dks": self.coef_dks.tolist(), "report": self.report}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["coef_end"]), np.asarray(d["coef_dkp"]), np.asarray(d["coef_dks"]), d.get("report", {}))


@dataclass(frozen=True)
class SamplingPlan:
    n_samples: int = 400
    power_box: tuple = (0.5, 1.0)
    k_range: tuple = (1.0, K_ZERO)
    holdout: float = 0.2
    steps_per_hour: int = 720
    seed: int = 0


class CompressionError(ValueError):
    pass


def _fit_ridge(F, y, lam=1e-10):
    G = F.T @ F + lam * np.eye(F.shape[1])
    return np.linalg.solve(G, F.T @ y)


def compress_surrogate(net: SurrogateNet, pump_params=None, plan: SamplingPlan | None = None) -> HourlyTransitionModel:
    """Fit the hourly map on one-hour fine-scale surrogate rollouts."""
    plan = plan or SamplingPlan()
    pp, ps = pump_params or (primary_degradation(sigma_i=0.0), secondary_degradation(sigma_i=0.0))
    lo, hi = plan.power_box
    if lo > 0.5 + 1e-9 or hi < 1.0 - 1e-9:
        raise CompressionError("sampling box must cover 50-100 % power")
    if plan.k_range[1] < K_ZERO - 1e-9:
        raise CompressionError("sampled loss coefficients must reach K_0")
    if plan.n_samples < 30:
        raise CompressionError("too few samples to fit the hourly model")
    rng = np.random.default_rng(plan.seed)
    n = plan.n_samples
    starts = rng.uniform(lo, hi, n)
    # half the probes are small moves, half span the box
    targets = np.where(rng.random(n) < 0.5, np.clip(starts + rng.normal(0, 0.05, n), lo, hi), rng.uniform(lo, hi, n))
    targets[: max(3, n // 20)] = starts[: max(3, n // 20)]
    ks = rng.uniform(*plan.k_range, size=(n, 2))
    c = net.constants
    end = np.empty(n)
    dkp = np.empty(n)
    dks = np.empty(n)
    t0 = time.perf_counter()
    for i in range(n):
        x0 = steady_state(starts[i], ks[i, 0], ks[i, 1], constants=c).x
        traj = rollout(net, x0, x0, np.full(plan.steps_per_hour, targets[i] * FULL_POWER), ks[i, 0], ks[i, 1])
        end[i] = traj[-1, IDX["Q_RX"]]
        vp = np.concatenate([[x0[IDX["m_P_p"]]], traj[:, IDX["m_P_p"]]]) / c["rho_p"]
        vs = np.concatenate([[x0[IDX["m_P_s"]]], traj[:, IDX["m_P_s"]]]) / c["rho_s"]
        a, _ = degrade_series(PumpHealth(ks[i, 0]), vp[1:], pp, v_prev=vp[0])
        b, _ = degrade_series(PumpHealth(ks[i, 1]), vs[1:], ps, v_prev=vs[0])
        dkp[i] = a.K - ks[i, 0]
        dks[i] = b.K - ks[i, 1]
    sim_time = time.perf_counter() - t0
    F = _features(starts * FULL_POWER, targets * FULL_POWER)
    n_test = int(round(plan.holdout * n))
    tr, te = slice(n_test, n), slice(0, n_test)
    coef_end = _fit_ridge(F[tr], end[tr] / FULL_POWER)
    coef_p = _fit_ridge(F[tr], dkp[tr])
    coef_s = _fit_ridge(F[tr], dks[tr])
    model = HourlyTransitionModel(coef_end, coef_p, coef_s)
    e, kp1, ks1, _ = model.predict(targets[te] * FULL_POWER, starts[te] * FULL_POWER, ks[te, 0], ks[te, 1])
    rm = lambda a, b: float(np.sqrt(np.mean((a - b) ** 2))) if n_test else float("nan")
    rmse_kp = rm(kp1, ks[te, 0] + dkp[te])
    rmse_ks = rm(ks1, ks[te, 1] + dks[te])
    model.report = {
        "n_samples": n, "n_holdout": n_test, "fine_sim_seconds": sim_time,
        "rmse_end_power_W": rm(e, end[te]),
        "rmse_K_p": rmse_kp, "rmse_K_s": rmse_ks,
        # health-index error after a month of chained hours (errors add up)
        "rmse_eta_hour": max(rmse_kp, rmse_ks) / K_ZERO,
        "rmse_eta_month": max(rmse_kp, rmse_ks) * math.sqrt(720.0) / K_ZERO,
    }
    t1 = time.perf_counter()
    rollout_compressed(model, np.full(60 * 730, 0.8 * FULL_POWER), 0.8 * FULL_POWER, 1.0, 1.0)
    model.report["seconds_per_60_months"] = time.perf_counter() - t1
    return model


def rollout_compressed(model: HourlyTransitionModel, targets, start, K_p, K_s):
    """Chain hourly evaluations; returns (power, K_p, K_s, score) per hour."""
    targets = np.asarray(targets, dtype=float)
    prev = np.concatenate([[start], targets[:-1]])
    # end power settles on the target inside an hour, so the chain only needs
    # the previous target as the next start
    end, _, _, score = model.predict(targets, prev, 0.0, 0.0)
    dkp, dks = model.increments(prev, targets)
    return end, K_p + np.cumsum(dkp), K_s + np.cumsum(dks), score


@dataclass(frozen=True)
class RewardWeights:
    tracking: float = 1.0
    transition: float = 0.02
    maintenance: float = 20.0
    health_violation: float = 1e6
    wear: float = 1.9

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"reward weight {k} must be non-negative")


@dataclass
class OperatorPlan:
    targets: np.ndarray  # W per hour of the applied period (0 during shutdown)
    maintain: dict  # {"p": bool, "s": bool} at the start of the applied period
    shutdown: bool
    reward: dict
    horizon_targets: np.ndarray = field(default=None, repr=False)
    horizon_flags: list = field(default_factory=list)
    fallback: bool = False
    forced: bool = False

    def to_json(self):
        return json.dumps({
            "targets_W": [float(x) for x in self.targets], "maintain": self.maintain, "shutdown": self.shutdown,
            "reward": self.reward, "horizon_flags": self.horizon_flags, "fallback": self.fallback,
            "forced": self.forced,
        })


@dataclass
class PlanningObservation:
    """Everything an agent sees: demand over the reasoning horizon and health."""

    demand: np.ndarray  # W per hour
    boundaries: list  # hour offsets where maintenance may start (first = now)
    K_p: float
    K_s: float
    power: float  # current plant power (W); 0 when shut down
    maintenance_allowed_now: bool
    model: HourlyTransitionModel
    weights: RewardWeights


@dataclass
class AgentAction:
    targets: np.ndarray  # W per hour over the horizon, 0 in shutdown segments
    flags: list  # per boundary: (maintain_p, maintain_s)


class Agent(Protocol):
    def act(self, observation: PlanningObservation) -> AgentAction:
        ...


def _segments(n_hours, boundaries):
    b = list(boundaries) + [n_hours]
    return [(b[i], b[i + 1]) for i in range(len(boundaries))]


def evaluate_plan(obs: PlanningObservation, targets, flags):
    """Reward breakdown of a horizon plan under the compressed model."""
    w = obs.weights
    targets = np.asarray(targets, dtype=float)
    n = targets.size
    demand = obs.demand[:n]
    Kp, Ks = obs.K_p, obs.K_s
    prev = obs.power
    track = trans = wear = maint = 0.0
    min_eta = 1.0 - max(Kp, Ks) / K_ZERO
    for (a, b), (fp, fs) in zip(_segments(n, obs.boundaries), flags):
        if fp or fs:
            maint += (int(fp) + int(fs)) * w.maintenance
            Kp = 1.0 if fp else Kp
            Ks = 1.0 if fs else Ks
            track += float(np.sum(demand[a:b])) / FULL_POWER
            prev = 0.0
            continue
        seg = targets[a:b]
        starts = np.concatenate([[prev if prev > 0 else seg[0]], seg[:-1]])
        dkp, dks = obs.model.increments(starts, seg)
        kp_path = Kp + np.cumsum(dkp)
        ks_path = Ks + np.cumsum(dks)
        track += float(np.sum(np.abs(seg - demand[a:b]))) / FULL_POWER
        trans += float(np.sum(transition_score(starts, seg)))
        wear += float(np.sum(kp_path - 1.0) + np.sum(ks_path - 1.0))
        min_eta = min(min_eta, 1.0 - max(kp_path.max(), ks_path.max()) / K_ZERO)
        Kp, Ks = float(kp_path[-1]), float(ks_path[-1])
        prev = float(seg[-1])
    breach = min_eta <= ETA_MIN
    total = -w.tracking * track + w.transition * trans - w.wear * wear - maint - (w.health_violation if breach else 0.0)
    return {"total": total, "tracking_error": track, "transition_score": trans, "wear": wear,
            "maintenance_cost": maint, "min_eta": min_eta, "breach": bool(breach),
            "K_p_end": Kp, "K_s_end": Ks}


class CemDpAgent:
    """Cross-entropy search over maintenance flags; DP over hourly targets."""

    def __init__(self, grid_step: float = 0.01, power_range=(0.5, 1.0), population: int = 24,
                 elite: float = 0.25, iterations: int = 6, smoothing: float = 0.7, seed: int = 0):
        self.levels = np.round(np.arange(power_range[0], power_range[1] + 1e-9, grid_step), 10) * FULL_POWER
        self.population = population
        self.elite = elite
        self.iterations = iterations
        self.smoothing = smoothing
        self.seed = seed

    def _dp_segment(self, obs, demand, prev, remaining_weight, free_start):
        """Best target sequence for one operating segment.

        ``remaining_weight[h]`` weighs the loss-coefficient increment of hour h
        by the number of later hours (until reset) that carry it.
        """
        w = obs.weights
        L = self.levels
        n = demand.size
        dkp, dks = obs.model.increments(L[:, None], L[None, :])
        inc = dkp + dks
        tscore = transition_score(L[:, None], L[None, :])
        step_cost = -w.transition * tscore  # (from, to)
        track = w.tracking * np.abs(L[None, :] - demand[:, None]) / FULL_POWER  # (hour, level)
        back = np.zeros((n, L.size), dtype=np.int64)
        if free_start or prev <= 0:
            value = track[0].copy()
            back[0] = -1
        else:
            pk, sk = obs.model.increments(np.full(L.size, prev), L)
            value = track[0] - w.transition * transition_score(prev, L) + w.wear * remaining_weight[0] * (pk + sk)
            back[0] = -1
        for h in range(1, n):
            cand = value[:, None] + step_cost + w.wear * remaining_weight[h] * inc
            back[h] = np.argmin(cand, axis=0)
            value = cand[back[h], np.arange(L.size)] + track[h]
        path = np.empty(n, dtype=np.int64)
        path[-1] = int(np.argmin(value))
        for h in range(n - 1, 0, -1):
            path[h - 1] = back[h, path[h]]
        return L[path]

    def _targets_for(self, obs, flags):
        n = obs.demand.size
        segs = _segments(n, obs.boundaries)
        # hours until each pump's next reset (or horizon end), for wear weighting
        reset_at = n
        remaining = np.zeros(n)
        resets = [a for (a, _), (fp, fs) in zip(segs, flags) if fp or fs]
        for h in range(n):
            nxt = min([r for r in resets if r > h], default=reset_at)
            remaining[h] = nxt - h - 1
        out = np.zeros(n)
        prev = obs.power
        for (a, b), (fp, fs) in zip(segs, flags):
            if fp or fs:
                prev = 0.0
                continue
            out[a:b] = self._dp_segment(obs, obs.demand[a:b], prev, remaining[a:b], prev <= 0)
            prev = out[b - 1]
        return out

    def act(self, obs: PlanningObservation) -> AgentAction:
        nb = len(obs.boundaries)
        rng = np.random.default_rng(self.seed)
        prob = np.full((nb, 2), 0.5)
        if not obs.maintenance_allowed_now:
            prob[0] = 0.0
        cache = {}

        def score(flags):
            key = tuple(map(tuple, flags))
            if key not in cache:
                targets = self._targets_for(obs, key)
                cache[key] = (evaluate_plan(obs, targets, key)["total"], targets)
            return cache[key][0]

        best_key = tuple((False, False) for _ in range(nb))
        score(np.zeros((nb, 2), dtype=bool))
        n_elite = max(1, int(round(self.elite * self.population)))
        for _ in range(self.iterations):
            samples = rng.random((self.population, nb, 2)) < prob
            vals = np.array([score(s) for s in samples])
            order = np.argsort(-vals, kind="stable")[:n_elite]
            prob = self.smoothing * samples[order].mean(axis=0) + (1 - self.smoothing) * prob
            if not obs.maintenance_allowed_now:
                prob[0] = 0.0
        best_key = max(cache, key=lambda k: (cache[k][0], -sum(map(sum, k))))
        return AgentAction(cache[best_key][1], [tuple(map(bool, f)) for f in best_key])


def plan_period(demand, health, model: HourlyTransitionModel, weights: RewardWeights | None = None,
                agent: Agent | None = None, applied_hours: int = 720, boundaries=None, power: float = FULL_POWER,
                maintenance_allowed_now: bool = True) -> OperatorPlan:
    """Plan the next applied period over a longer reasoning horizon.

    ``demand`` gives hourly requested power (W) over the reasoning horizon;
    ``boundaries`` lists the hour offsets of future planning boundaries inside
    it (default: every ``applied_hours``). ``health`` is (K_p, K_s) or a pair
    of :class:`PumpHealth`.
    """
    weights = weights or RewardWeights()
    demand = np.asarray(demand, dtype=float)
    if demand.size < applied_hours:
        raise ValueError("demand must cover at least the applied period")
    Kp, Ks = (h.K if isinstance(h, PumpHealth) else float(h) for h in health)
    if boundaries is None:
        boundaries = list(range(0, demand.size, applied_hours))
    boundaries = sorted(set([0] + [int(b) for b in boundaries if 0 <= b < demand.size]))
    obs = PlanningObservation(np.clip(demand, 0.5 * FULL_POWER, FULL_POWER), boundaries, Kp, Ks, power,
                              maintenance_allowed_now, model, weights)
    agent = agent or CemDpAgent()
    fallback = False
    try:
        action = agent.act(obs)
        targets = np.asarray(action.targets, dtype=float)
        flags = [tuple(map(bool, f)) for f in action.flags]
        if targets.shape != demand.shape or len(flags) != len(boundaries):
            raise ValueError("agent returned a plan of the wrong shape")
        if not maintenance_allowed_now and any(flags[0]):
            raise ValueError("agent scheduled maintenance outside an allowed window")
        for (a, b), f in zip(_segments(demand.size, boundaries), flags):
            seg = targets[a:b]
            if not any(f) and (seg.min() < 0.5 * FULL_POWER - 1e-6 or seg.max() > FULL_POWER + 1e-6):
                raise ValueError("agent planned power outside 50-100 %")
    except Exception as exc:  # noqa: BLE001 - any agent failure falls back
        fallback = True
        targets = obs.demand.copy()
        flags = [(False, False) for _ in boundaries]
        agent_error = repr(exc)
    # health floor: force maintenance when the no-maintenance rollout breaches
    forced = False
    no_maint = [(False, False)] * len(boundaries)
    base = CemDpAgent()._targets_for(obs, no_maint) if fallback else targets
    _, kp_path, ks_path, _ = rollout_compressed(model, base, power if power > 0 else base[0], Kp, Ks)
    for pump, path in (("p", kp_path), ("s", ks_path)):
        eta = 1.0 - path / K_ZERO
        if maintenance_guard(eta):
            breach_hour = int(np.argmax(eta <= ETA_MIN))
            allowed = [i for i, b in enumerate(boundaries) if b <= breach_hour and (i > 0 or maintenance_allowed_now)]
            if allowed and not any(f[0 if pump == "p" else 1] for f in flags[: allowed[-1] + 1]):
                i = allowed[-1]
                fp, fs = flags[i]
                flags[i] = (True, fs) if pump == "p" else (fp, True)
                forced = True
    if forced:
        targets = CemDpAgent()._targets_for(obs, flags)
    reward = evaluate_plan(obs, targets, flags)
    if fallback:
        reward["agent_error"] = agent_error
    shutdown = any(flags[0])
    applied = np.zeros(applied_hours) if shutdown else targets[:applied_hours].copy()
    return OperatorPlan(applied, {"p": flags[0][0], "s": flags[0][1]}, shutdown, reward, targets, flags,
                        fallback, forced)

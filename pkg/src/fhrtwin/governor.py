"""Reference governor: scale setpoint moves so predicted trajectories respect bounds."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .surrogate.net import SurrogateError, SurrogateNet, rollout
from .variables import IDX

FULL_POWER = 280e6


@dataclass(frozen=True)
class Constraint:
    var: str
    bound: float
    direction: str  # ">=" or "<="
    buffer: float = 0.0

    def __post_init__(self):
        if self.var not in IDX:
            raise KeyError(f"unknown constrained variable {self.var!r}")
        if self.direction not in (">=", "<="):
            raise ValueError("direction must be '>=' or '<='")
        if self.buffer < 0:
            raise ValueError("buffers must be non-negative")

    @property
    def effective(self) -> float:
        return self.bound + self.buffer if self.direction == ">=" else self.bound - self.buffer

    def excess(self, values) -> np.ndarray:
        """Positive where ``values`` cross the buffered bound."""
        v = np.asarray(values, dtype=float)
        return (self.effective - v) if self.direction == ">=" else (v - self.effective)

    def raw_excess(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        return (self.bound - v) if self.direction == ">=" else (v - self.bound)


@dataclass(frozen=True)
class ConstraintSet:
    constraints: tuple = (
        Constraint("m_P_p", 720.0, ">="),
        Constraint("m_P_s", 1000.0, ">="),
        Constraint("T_ihx_s_out", 890.0, "<="),
    )

    def __iter__(self):
        return iter(self.constraints)

    def with_buffers(self, buffers: dict) -> "ConstraintSet":
        return ConstraintSet(tuple(replace(c, buffer=float(buffers.get(c.var, c.buffer))) for c in self.constraints))

    def with_spread_buffers(self, spread: dict, factor: float) -> "ConstraintSet":
        """Buffers proportional to the ensemble standard deviation of each variable."""
        if factor < 0:
            raise ValueError("spread factor must be non-negative")
        return self.with_buffers({c.var: factor * float(spread.get(c.var, 0.0)) for c in self.constraints})

    def first_violation(self, traj: np.ndarray, allowance: dict | None = None):
        """Name of the first constraint violated anywhere in ``traj``, else None.

        ``allowance`` maps a variable to an excess that is tolerated (used when
        the starting state already sits past a bound).
        """
        allowance = allowance or {}
        for c in self.constraints:
            if np.any(c.excess(traj[:, IDX[c.var]]) > allowance.get(c.var, 0.0)):
                return c.var
        return None

    def start_allowance(self, x_now) -> dict:
        """Excess of a starting state over each buffered bound, clipped at zero."""
        x = np.asarray(x_now, dtype=float)
        return {c.var: max(0.0, float(c.excess(x[IDX[c.var]]))) for c in self.constraints}

    def satisfied(self, traj: np.ndarray) -> bool:
        return self.first_violation(traj) is None


@dataclass
class GovernorDecision:
    setpoint: float
    kappa: float
    binding: str | None
    trajectory: np.ndarray | None = field(default=None, repr=False)
    target: float = float("nan")
    previous: float = float("nan")
    evaluations: int = 0


class GovernorInfeasibleError(RuntimeError):
    """Even holding the previous setpoint is predicted to violate a bound."""

    def __init__(self, message, decision: GovernorDecision):
        super().__init__(message)
        self.decision = decision


def _predict(net, x2, x1, setpoint, horizon, K_p, K_s, theta):
    try:
        return rollout(net, x2, x1, np.full(horizon, setpoint), K_p, K_s, theta)
    except SurrogateError:
        return None


def govern(target: float, previous: float, net: SurrogateNet, x_now, constraints: ConstraintSet | None = None,
           horizon: int = 1440, K_p: float = 1.0, K_s: float = 1.0, theta=None, tol: float = 1e-3,
           full_power: float = FULL_POWER, power_range=(0.5, 1.0)) -> GovernorDecision:
    """Largest kappa in [0, 1] whose held setpoint previous + kappa*(target - previous)
    keeps the predicted trajectory inside every buffered bound.

    ``x_now`` is the pair (x(k-1), x(k)). Bisection stops once the bracket is
    narrower than ``tol`` and returns the feasible (lower) end. If the current
    state is already past a bound, candidates may not push further past it
    than it already is; otherwise no command at all could be admitted.
    """
    constraints = constraints or ConstraintSet()
    lo_p, hi_p = power_range[0] * full_power, power_range[1] * full_power
    if not (lo_p - 1e-6 <= target <= hi_p + 1e-6):
        raise ValueError(f"target {target:g} W outside [{lo_p:g}, {hi_p:g}] W")
    if horizon < 1:
        raise ValueError("horizon must be at least one step")
    x2, x1 = (np.asarray(v, dtype=float) for v in x_now)
    allowance = constraints.start_allowance(x1)
    evals = 0

    def check(kappa):
        nonlocal evals
        evals += 1
        sp = previous + kappa * (target - previous)
        traj = _predict(net, x2, x1, sp, horizon, K_p, K_s, theta)
        if traj is None:
            return False, "divergence", None
        viol = constraints.first_violation(traj, allowance)
        return viol is None, viol, traj

    ok, viol, traj = check(1.0)
    if ok:
        return GovernorDecision(float(target), 1.0, None, traj, target, previous, evals)
    ok0, viol0, traj0 = check(0.0)
    if not ok0:
        hold = GovernorDecision(float(previous), 0.0, viol0, traj0, target, previous, evals)
        raise GovernorInfeasibleError(f"holding {previous:g} W is predicted to violate {viol0}", hold)
    lo, hi = 0.0, 1.0
    best, binding = traj0, viol
    n_iter = math.ceil(math.log2(1.0 / tol))
    for _ in range(n_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        ok, v, tr = check(mid)
        if ok:
            lo, best = mid, tr
        else:
            hi, binding = mid, v
    sp = previous + lo * (target - previous)
    return GovernorDecision(float(sp), lo, binding, best, target, previous, evals)


@dataclass
class Violation:
    t: float
    var: str
    excess: float
    cause: str


def audit_violations(times, truth: np.ndarray, constraints: ConstraintSet | None = None, shock_times=(),
                     transition_times=(), shock_window: float = 3600.0, transition_window: float = 900.0):
    """Every (time, variable, excess) where the truth trajectory crosses a raw bound.

    Crossings within ``shock_window`` after a boundary change are attributed to
    the shock; within ``transition_window`` after a setpoint change to
    transition micro-dynamics the model under-predicted; anything else to
    model error.
    """
    constraints = constraints or ConstraintSet()
    times = np.asarray(times, dtype=float)
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    shocks = np.asarray(sorted(shock_times), dtype=float)
    trans = np.asarray(sorted(transition_times), dtype=float)
    out = []
    for c in constraints:
        ex = c.raw_excess(truth[:, IDX[c.var]])
        for k in np.flatnonzero(ex > 0):
            t = times[k]
            if shocks.size and np.any((t >= shocks) & (t - shocks <= shock_window)):
                cause = "shock"
            elif trans.size and np.any((t >= trans) & (t - trans <= transition_window)):
                cause = "model_error/transition"
            else:
                cause = "model_error"
            out.append(Violation(float(t), c.var, float(ex[k]), cause))
    out.sort(key=lambda v: (v.t, v.var))
    return out


@dataclass
class GovernorLog:
    rows: list = field(default_factory=list)

    def record(self, t, decision: GovernorDecision, alarm: bool = False):
        self.rows.append((float(t), decision.target, decision.setpoint, decision.kappa, decision.binding or "",
                          int(alarm)))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "target", "admissible", "kappa", "binding", "alarm"])
            for r in self.rows:
                w.writerow([f"{r[0]:.10g}", f"{r[1]:.10g}", f"{r[2]:.10g}", f"{r[3]:.6g}", r[4], r[5]])

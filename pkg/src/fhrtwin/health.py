"""Pump degradation and health tracking.

Each step of length phi raises the loss coefficient by
``r_base * phi * (1 + alpha*V + alpha_m*|dV|) * (1 + xi)``, ``xi ~ N(0, sigma_I^2)``.
``r_base`` is solved so that constant rated flow reaches the declared head loss
at the declared time; an optional lognormal multiplier (sigma_D) is drawn once
per pump life. Fractional head loss is ``1 - K_commission / K``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._jit import USE_NUMBA, njit
from .variables import IDX

K_ZERO = 3.125
K_COMMISSION = 1.0
ETA_MIN = 0.2


def health_index(K: float, k_zero: float = K_ZERO):
    """eta = 1 - K / K_0."""
    K_arr = np.asarray(K, dtype=float)
    if np.any(K_arr <= 0):
        raise ValueError("loss coefficient must be positive")
    eta = 1.0 - K_arr / k_zero
    return float(eta) if eta.ndim == 0 else eta


@dataclass(frozen=True)
class DegradationParams:
    head_loss: float  # fraction, e.g. 0.10 for 10 %
    time_to_loss: float  # s
    rated_flow: float  # m^3/s
    sigma_d: float = 0.0
    sigma_i: float = 0.0
    alpha: float | None = None  # per m^3/s, defaults to 1/rated_flow
    alpha_m: float | None = None
    phi: float = 5.0
    k_commission: float = K_COMMISSION

    def __post_init__(self):
        if not self.time_to_loss > 0:
            raise ValueError("time_to_loss must be positive")
        if not 0.0 < self.head_loss < 1.0:
            raise ValueError("head_loss must lie in (0, 1)")
        if self.sigma_d < 0 or self.sigma_i < 0:
            raise ValueError("noise scales must be non-negative")
        if not self.phi > 0:
            raise ValueError("phi must be positive")
        if self.alpha is None:
            object.__setattr__(self, "alpha", 1.0 / self.rated_flow)
        if self.alpha_m is None:
            object.__setattr__(self, "alpha_m", 1.0 / self.rated_flow)

    @property
    def k_at_loss(self) -> float:
        return self.k_commission / (1.0 - self.head_loss)

    @property
    def r_base(self) -> float:
        """Base rate (1/s) hitting ``head_loss`` at ``time_to_loss`` under rated flow."""
        return (self.k_at_loss - self.k_commission) / ((1.0 + self.alpha * self.rated_flow) * self.time_to_loss)


def primary_degradation(**kw) -> DegradationParams:
    base = dict(head_loss=0.10, time_to_loss=4.6656e7, rated_flow=0.604, sigma_d=0.0, sigma_i=0.5e-3)
    base.update(kw)
    return DegradationParams(**base)


def secondary_degradation(**kw) -> DegradationParams:
    base = dict(head_loss=0.10, time_to_loss=2.592e7, rated_flow=0.937, sigma_d=0.0, sigma_i=1e-3)
    base.update(kw)
    return DegradationParams(**base)


def head_loss(K: float, k_commission: float = K_COMMISSION) -> float:
    return 1.0 - k_commission / K


@dataclass(frozen=True)
class PumpHealth:
    """One pump: elapsed time, loss coefficient and the life multiplier."""

    K: float = K_COMMISSION
    t: float = 0.0
    life_multiplier: float = 1.0

    @property
    def eta(self) -> float:
        return health_index(self.K)


def new_pump_life(params: DegradationParams, rng: np.random.Generator | None = None, K: float = K_COMMISSION,
                  t: float = 0.0) -> PumpHealth:
    """Start a pump life; draws the lognormal rate multiplier when sigma_D > 0."""
    mult = 1.0
    if params.sigma_d > 0:
        if rng is None:
            raise ValueError("sigma_D > 0 needs a random generator")
        mult = float(rng.lognormal(0.0, params.sigma_d))
    return PumpHealth(K, t, mult)


def degrade(pump: PumpHealth, V: float, dV: float, params: DegradationParams,
            rng: np.random.Generator | None = None) -> PumpHealth:
    """Advance one health step of length ``params.phi``."""
    if not (math.isfinite(V) and math.isfinite(dV)):
        raise ValueError("non-finite flow input")
    if V < 0:
        raise ValueError("volumetric flow must be non-negative")
    xi = 0.0
    if params.sigma_i > 0:
        if rng is None:
            raise ValueError("sigma_I > 0 needs a random generator")
        xi = float(rng.normal(0.0, params.sigma_i))
    dK = params.r_base * pump.life_multiplier * params.phi * (1.0 + params.alpha * V + params.alpha_m * abs(dV)) * (1.0 + xi)
    return replace(pump, K=pump.K + max(dK, 0.0), t=pump.t + params.phi)


@njit
def _degrade_series_nb(K0, V, xi, rate, phi, alpha, alpha_m, v_prev, out):
    K = K0
    prev = v_prev
    for i in range(V.shape[0]):
        dK = rate * phi * (1.0 + alpha * V[i] + alpha_m * abs(V[i] - prev)) * (1.0 + xi[i])
        if dK > 0.0:
            K += dK
        prev = V[i]
        out[i] = K
    return K


def _degrade_series_np(K0, V, xi, rate, phi, alpha, alpha_m, v_prev, out):
    dV = np.abs(np.diff(V, prepend=v_prev))
    dK = np.maximum(rate * phi * (1.0 + alpha * V + alpha_m * dV) * (1.0 + xi), 0.0)
    np.cumsum(dK, out=out)
    out += K0
    return out[-1] if out.size else K0


degrade_series_kernel = _degrade_series_nb if USE_NUMBA else _degrade_series_np


def degrade_series(pump: PumpHealth, V, params: DegradationParams, rng: np.random.Generator | None = None,
                   v_prev: float | None = None):
    """Degrade through a sequence of per-step volumetric flows.

    ``dV`` is taken as the change from the previous step's flow (``v_prev``,
    defaulting to ``V[0]``). Returns (pump after the series, K after each step).
    """
    V = np.ascontiguousarray(V, dtype=float)
    if V.size and (V.min() < 0 or not np.all(np.isfinite(V))):
        raise ValueError("flows must be finite and non-negative")
    if params.sigma_i > 0:
        if rng is None:
            raise ValueError("sigma_I > 0 needs a random generator")
        xi = rng.normal(0.0, params.sigma_i, V.size)
    else:
        xi = np.zeros(V.size)
    out = np.empty(V.size)
    prev = float(V[0]) if v_prev is None and V.size else float(v_prev or 0.0)
    rate = params.r_base * pump.life_multiplier
    K = degrade_series_kernel(pump.K, V, xi, rate, params.phi, params.alpha, params.alpha_m, prev, out)
    return replace(pump, K=float(K), t=pump.t + params.phi * V.size), out


def time_to_head_loss(params: DegradationParams, V: float | None = None) -> float:
    """Noise-free time at which constant flow ``V`` reaches the declared head loss."""
    V = params.rated_flow if V is None else V
    rate = params.r_base * (1.0 + params.alpha * V)
    return (params.k_at_loss - params.k_commission) / rate


def pump_required_power(x_sys, K: float, loop: str = "p", efficiency: float = 0.8,
                        density: float | None = None, k_commission: float = K_COMMISSION):
    """(Q_P, Q_P,D): hydraulic power over mechanical efficiency, then the K penalty.

    ``x_sys`` may be one state or an (n, 42) array of states.
    """
    from .constants import default_constants

    c = default_constants()
    x = np.asarray(x_sys, dtype=float)
    if loop == "p":
        dp, m = x[..., IDX["dP_p"]], x[..., IDX["m_P_p"]]
        rho = density or c["rho_p"]
    elif loop == "s":
        dp, m = x[..., IDX["dP_s"]], x[..., IDX["m_P_s"]]
        rho = density or c["rho_s"]
    else:
        raise ValueError("loop must be 'p' or 's'")
    if not (np.all(np.isfinite(dp)) and np.all(np.isfinite(m))):
        raise ValueError("hydraulic states must be finite")
    q_p = dp * (m / rho) / efficiency
    return q_p, q_p * K / k_commission


@dataclass
class HealthLog:
    rows: list = field(default_factory=list)

    def record(self, t, pump_p: PumpHealth, pump_s: PumpHealth, q_pd_p, q_pd_s):
        self.rows.append((t, pump_p.K, pump_p.eta, pump_s.K, pump_s.eta, q_pd_p, q_pd_s))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "K_p", "eta_p", "K_s", "eta_s", "Q_PD_p", "Q_PD_s"])
            for r in self.rows:
                w.writerow([f"{v:.10g}" for v in r])

"""Wired network of VARMAX blocks plus physics hooks, advancing the 42-entry state."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .._jit import USE_NUMBA, njit
from ..constants import PlantConstants, default_constants
from ..variables import (
    I_MC, I_MPP, I_MPS, I_MS, I_MSG, I_NI, I_NP, I_NS, I_NXE, I_DPP, I_DPS, I_QRX, I_T, I_TSGOUT,
    IDX, N_STATE, STATE_IDS,
)
from .varmax import VarmaxParams

CHECKPOINT_VERSION = 1
TARGET = "Q_RX_T"

HOOK_VARS = {
    "clock": ("t",),
    "xenon": ("N_I", "N_Xe"),
    "pumps": ("m_c", "m_s", "m_sg", "n_p", "n_s", "dP_p", "dP_s"),
    "hold_boundary": ("T_sg_out",),
}

# hook constant vector layout
H_DT, H_RP, H_RS, H_AP, H_BP, H_AS, H_BS, H_RHOP, H_RHOS = range(9)
H_LAMI, H_LAMX, H_SIGX, H_GAMI, H_GAMX, H_NU, H_FLUX, H_Q0 = range(9, 17)
N_HOOK = 17


class SurrogateError(RuntimeError):
    pass


class WiringError(ValueError):
    pass


@dataclass(frozen=True)
class Block:
    """A VARMAX block owning ``outputs``; ``inputs`` are (variable, lag) pairs.

    Lag 0 means the value produced earlier in the same step; the exogenous
    target power is addressed as ``"Q_RX_T"`` and only at lag 0.
    """

    name: str
    outputs: tuple
    inputs: tuple
    params: VarmaxParams

    def __post_init__(self):
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "inputs", tuple((str(v), int(l)) for v, l in self.inputs))
        if self.params.n_x != len(self.outputs):
            raise WiringError(f"block {self.name}: params have {self.params.n_x} states, wiring {len(self.outputs)}")
        if self.params.n_u != len(self.inputs):
            raise WiringError(f"block {self.name}: params have {self.params.n_u} inputs, wiring {len(self.inputs)}")
        if self.params.p != 2:
            raise WiringError(f"block {self.name}: the network runs on two state lags")


def xenon_update(n_i: float, n_xe: float, power: float, dt: float, constants: PlantConstants | None = None):
    """Advance iodine and xenon (reactivity units) over ``dt`` at constant power.

    Exact solution of the linear two-ODE system with the flux held fixed.
    Returns (N_I, N_Xe, xenon reactivity).
    """
    c = constants or default_constants()
    vals = (n_i, n_xe, power, dt)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("xenon_update needs finite inputs")
    if n_i < 0 or n_xe < 0:
        raise ValueError("concentrations must be non-negative")
    h = _hook_constants(c)
    ni, nx = _xenon_exact(n_i, n_xe, power, dt, h)
    return ni, nx, -nx


@njit
def _xenon_exact(n_i, n_xe, power, dt, h):
    phi = h[H_FLUX] * power / h[H_Q0]
    sphi = h[H_SIGX] * phi
    prod = sphi / h[H_NU]
    li = h[H_LAMI]
    r = h[H_LAMX] + sphi
    i_eq = h[H_GAMI] * prod / li
    ei = math.exp(-li * dt)
    er = math.exp(-r * dt)
    ni = i_eq + (n_i - i_eq) * ei
    x_eq = (h[H_GAMX] * prod + li * i_eq) / r
    if abs(r - li) > 1e-15:
        trans = li * (n_i - i_eq) * (ei - er) / (r - li)
    else:
        trans = li * (n_i - i_eq) * dt * ei
    nx = x_eq + (n_xe - x_eq) * er + trans
    return ni, nx


def _hook_constants(c: PlantConstants, pump_r=None):
    h = np.zeros(N_HOOK)
    h[H_DT] = c.raw["plant"]["dt"]
    r_p, r_s = pump_r if pump_r is not None else (c["r_loop_p"], c["r_loop_s"])
    h[H_RP], h[H_RS] = r_p, r_s
    h[H_AP], h[H_BP] = c["a_pump_p"], c["b_pump_p"]
    h[H_AS], h[H_BS] = c["a_pump_s"], c["b_pump_s"]
    h[H_RHOP], h[H_RHOS] = c["rho_p"], c["rho_s"]
    h[H_LAMI], h[H_LAMX], h[H_SIGX] = c["lam_i"], c["lam_x"], c["sig_x"]
    h[H_GAMI], h[H_GAMX], h[H_NU], h[H_FLUX] = c["gam_i"], c["gam_x"], c["nu"], c["flux0"]
    h[H_Q0] = c.full_power
    return h


@dataclass
class Layout:
    """Integer tables describing the network for the compiled kernels."""

    nx: np.ndarray
    nu: np.ndarray
    out_off: np.ndarray
    in_off: np.ndarray
    par_off: np.ndarray
    eps_off: np.ndarray
    out_idx: np.ndarray
    in_idx: np.ndarray
    in_lag: np.ndarray
    flags: np.ndarray  # [xenon, pumps, hold_boundary, clock]
    n_theta: int
    n_eps: int


@dataclass(frozen=True)
class SurrogateNet:
    blocks: tuple
    hooks: tuple = ("clock", "xenon", "pumps", "hold_boundary")
    mode: str = "normalized"
    scale: np.ndarray = field(default_factory=lambda: np.ones(N_STATE))
    input_scale: float = 1.0
    pump_r: tuple = (0.0, 0.0)
    metadata: dict = field(default_factory=dict)
    constants: PlantConstants | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.mode not in ("normalized", "raw"):
            raise WiringError("mode must be 'normalized' or 'raw'")
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "hooks", tuple(self.hooks))
        scale = np.asarray(self.scale, dtype=float)
        if self.mode == "raw":
            scale = np.ones(N_STATE)
        object.__setattr__(self, "scale", scale)
        if self.constants is None:
            object.__setattr__(self, "constants", default_constants())
        self._check_wiring()
        object.__setattr__(self, "_layout", self._build_layout())
        object.__setattr__(self, "_hookc", _hook_constants(self.constants, self.pump_r))

    # ---- structure
    def _check_wiring(self):
        producer = {}
        for hook in self.hooks:
            if hook not in HOOK_VARS:
                raise WiringError(f"unknown physics hook {hook!r}")
            for v in HOOK_VARS[hook]:
                if v in producer:
                    raise WiringError(f"{v} produced twice ({producer[v]} and {hook})")
                producer[v] = hook
        produced_so_far = set()
        for b in self.blocks:
            for v, lag in b.inputs:
                if v == TARGET:
                    if lag != 0:
                        raise WiringError(f"block {b.name}: the target input is only available at lag 0")
                    continue
                if v not in IDX:
                    raise WiringError(f"block {b.name}: unknown input {v!r}")
                if lag not in (0, 1, 2):
                    raise WiringError(f"block {b.name}: lag {lag} unsupported")
                if lag == 0 and v not in produced_so_far:
                    raise WiringError(f"block {b.name}: {v} at lag 0 is not produced by an earlier block (cycle)")
            for v in b.outputs:
                if v not in IDX:
                    raise WiringError(f"block {b.name}: unknown output {v!r}")
                if v in producer:
                    raise WiringError(f"{v} produced twice ({producer[v]} and {b.name})")
                producer[v] = b.name
                produced_so_far.add(v)
        missing = [v for v in STATE_IDS if v not in producer]
        if missing:
            raise WiringError(f"state variables without a producer: {missing}")

    def _build_layout(self):
        nb = len(self.blocks)
        nx = np.array([len(b.outputs) for b in self.blocks], dtype=np.int64)
        nu = np.array([len(b.inputs) for b in self.blocks], dtype=np.int64)
        out_off = np.zeros(nb + 1, dtype=np.int64)
        in_off = np.zeros(nb + 1, dtype=np.int64)
        par_off = np.zeros(nb + 1, dtype=np.int64)
        eps_off = np.zeros(nb + 1, dtype=np.int64)
        out_idx, in_idx, in_lag = [], [], []
        for i, b in enumerate(self.blocks):
            out_idx += [IDX[v] for v in b.outputs]
            in_idx += [-1 if v == TARGET else IDX[v] for v, _ in b.inputs]
            in_lag += [lag for _, lag in b.inputs]
            n, m = nx[i], nu[i]
            out_off[i + 1] = out_off[i] + n
            in_off[i + 1] = in_off[i] + m
            par_off[i + 1] = par_off[i] + n + 2 * n * n + n * m + b.params.q * n * n
            eps_off[i + 1] = eps_off[i] + n
            if b.params.q not in (0, 1):
                raise WiringError("network kernels support q in {0, 1}")
        flags = np.array([h in self.hooks for h in ("xenon", "pumps", "hold_boundary", "clock")], dtype=np.int64)
        qs = np.array([b.params.q for b in self.blocks], dtype=np.int64)
        lay = Layout(nx, nu, out_off, in_off, par_off, eps_off, np.array(out_idx, dtype=np.int64),
                     np.array(in_idx, dtype=np.int64), np.array(in_lag, dtype=np.int64), flags,
                     int(par_off[-1]), int(eps_off[-1]))
        lay.q = qs
        return lay

    @property
    def layout(self) -> Layout:
        return self._layout

    @property
    def hook_constants(self) -> np.ndarray:
        return self._hookc

    def theta(self) -> np.ndarray:
        """All block dynamics parameters, concatenated in block order."""
        return np.concatenate([b.params.flat() for b in self.blocks])

    def theta_names(self):
        return [n for b in self.blocks for n in b.params.flat_names(prefix=f"{b.name}.")]

    def theta_index(self, names):
        lookup = {n: i for i, n in enumerate(self.theta_names())}
        missing = [n for n in names if n not in lookup]
        if missing:
            raise KeyError(f"unknown surrogate parameters: {missing}")
        return np.array([lookup[n] for n in names], dtype=np.int64)

    def with_theta(self, theta) -> "SurrogateNet":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.layout.n_theta,):
            raise ValueError("theta has the wrong length")
        blocks = []
        for i, b in enumerate(self.blocks):
            sl = theta[self.layout.par_off[i]:self.layout.par_off[i + 1]]
            blocks.append(replace(b, params=b.params.with_flat(sl)))
        return replace(self, blocks=tuple(blocks))

    def block(self, name) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    # ---- stepping
    def step(self, x2, x1, target, K_p=1.0, K_s=1.0, theta=None, eps=None):
        """Single-member step; see :func:`surrogate_step`."""
        return surrogate_step(self, x2, x1, target, K_p=K_p, K_s=K_s, theta=theta, eps=eps)

    # ---- persistence
    def to_dict(self):
        return {
            "version": CHECKPOINT_VERSION,
            "mode": self.mode,
            "hooks": list(self.hooks),
            "scale": self.scale.tolist(),
            "input_scale": self.input_scale,
            "pump_r": list(self.pump_r),
            "metadata": self.metadata,
            "blocks": [
                {"name": b.name, "outputs": list(b.outputs), "inputs": [list(i) for i in b.inputs],
                 "params": b.params.to_dict(), "report": b.params.report}
                for b in self.blocks
            ],
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, d, constants=None):
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        blocks = []
        for bd in d["blocks"]:
            params = VarmaxParams.from_dict(bd["params"])
            params.report = bd.get("report", {})
            blocks.append(Block(bd["name"], tuple(bd["outputs"]), tuple(tuple(i) for i in bd["inputs"]), params))
        return cls(tuple(blocks), tuple(d["hooks"]), d["mode"], np.asarray(d["scale"]), d["input_scale"],
                   tuple(d["pump_r"]), d.get("metadata", {}), constants)

    @classmethod
    def load(cls, path, constants=None):
        return cls.from_dict(json.loads(Path(path).read_text()), constants)



# --------------------------------------------------------------------------- kernels


@njit
def _member_step(x2, x1, target, theta, eps_prev, eps_now, K_p, K_s, nx, nu, out_off, in_off,
                 par_off, eps_off, out_idx, in_idx, in_lag, qs, flags, scale, u_scale, h, out):
    nb = nx.shape[0]
    ns = x1.shape[0]
    # normalised lags; z0 holds this step's outputs as blocks produce them
    z0 = np.empty(ns)
    z1 = np.empty(ns)
    z2 = np.empty(ns)
    for j in range(ns):
        z1[j] = x1[j] / scale[j]
        z2[j] = x2[j] / scale[j]
        z0[j] = z1[j]
    noisy = False
    for j in range(eps_prev.shape[0]):
        if eps_prev[j] != 0.0:
            noisy = True
            break
    u0 = target / u_scale
    for b in range(nb):
        n = nx[b]
        m = nu[b]
        base = par_off[b]
        o0 = out_off[b]
        i0 = in_off[b]
        e0 = eps_off[b]
        for r in range(n):
            acc = theta[base + r]
            a1 = base + n + r * n
            a2 = base + n + n * n + r * n
            for cidx in range(n):
                j = out_idx[o0 + cidx]
                acc += theta[a1 + cidx] * z1[j] + theta[a2 + cidx] * z2[j]
            bo = base + n + 2 * n * n + r * m
            for cidx in range(m):
                j = in_idx[i0 + cidx]
                if j < 0:
                    val = u0
                else:
                    lag = in_lag[i0 + cidx]
                    if lag == 0:
                        val = z0[j]
                    elif lag == 1:
                        val = z1[j]
                    else:
                        val = z2[j]
                acc += theta[bo + cidx] * val
            if noisy and qs[b] > 0:
                mo = base + n + 2 * n * n + n * m + r * n
                for cidx in range(n):
                    acc += theta[mo + cidx] * eps_prev[e0 + cidx]
            acc += eps_now[e0 + r]
            j = out_idx[o0 + r]
            out[j] = acc * scale[j]
        # publish the block's outputs only after all its rows are done
        for r in range(n):
            j = out_idx[o0 + r]
            z0[j] = out[j] / scale[j]
    if flags[3]:
        out[I_T] = x1[I_T] + h[H_DT]
    if flags[2]:
        out[I_TSGOUT] = x1[I_TSGOUT]
    if flags[0]:
        ni, nxe = _xenon_exact(x1[I_NI], x1[I_NXE], out[I_QRX], h[H_DT], h)
        out[I_NI] = ni
        out[I_NXE] = nxe
    if flags[1]:
        mp = out[I_MPP]
        ms = out[I_MPS]
        out[I_MC] = mp
        out[I_MS] = ms
        out[I_MSG] = ms
        dpp = h[H_RP] * mp * mp
        dps = h[H_RS] * ms * ms
        out[I_DPP] = dpp
        out[I_DPS] = dps
        vp = mp / h[H_RHOP]
        vs = ms / h[H_RHOS]
        out[I_NP] = math.sqrt(max(K_p * dpp + h[H_BP] * vp * vp, 0.0) / h[H_AP])
        out[I_NS] = math.sqrt(max(K_s * dps + h[H_BS] * vs * vs, 0.0) / h[H_AS])


@njit
def _batch_step_nb(x2, x1, target, theta, eps_prev, eps_now, K_p, K_s, nx, nu, out_off, in_off,
                   par_off, eps_off, out_idx, in_idx, in_lag, qs, flags, scale, u_scale, h, out):
    n_m = x1.shape[0]
    shared = theta.shape[0] == 1
    for i in range(n_m):
        th = theta[0] if shared else theta[i]
        out[i, :] = x1[i, :]
        _member_step(x2[i], x1[i], target, th, eps_prev[i], eps_now[i], K_p[i], K_s[i], nx, nu,
                     out_off, in_off, par_off, eps_off, out_idx, in_idx, in_lag, qs, flags, scale,
                     u_scale, h, out[i])


def _batch_step_np(x2, x1, target, theta, eps_prev, eps_now, K_p, K_s, nx, nu, out_off, in_off,
                   par_off, eps_off, out_idx, in_idx, in_lag, qs, flags, scale, u_scale, h, out):
    """Vectorised twin of the compiled batch step (members along axis 0)."""
    n_m = x1.shape[0]
    theta = np.broadcast_to(theta, (n_m, theta.shape[1]))
    out[:] = x1
    z1 = x1 / scale
    z2 = x2 / scale
    for b in range(nx.shape[0]):
        n, m = int(nx[b]), int(nu[b])
        base = int(par_off[b])
        oi = out_idx[out_off[b]:out_off[b + 1]]
        ii = in_idx[in_off[b]:in_off[b + 1]]
        il = in_lag[in_off[b]:in_off[b + 1]]
        a = theta[:, base:base + n]
        A1 = theta[:, base + n:base + n + n * n].reshape(n_m, n, n)
        A2 = theta[:, base + n + n * n:base + n + 2 * n * n].reshape(n_m, n, n)
        B = theta[:, base + n + 2 * n * n:base + n + 2 * n * n + n * m].reshape(n_m, n, m)
        u = np.empty((n_m, m))
        zc = out / scale
        for c in range(m):
            j = ii[c]
            if j < 0:
                u[:, c] = target / u_scale
            else:
                u[:, c] = (zc, z1, z2)[il[c]][:, j]
        acc = a + np.einsum("mij,mj->mi", A1, z1[:, oi]) + np.einsum("mij,mj->mi", A2, z2[:, oi])
        acc += np.einsum("mij,mj->mi", B, u)
        e0 = int(eps_off[b])
        if qs[b] > 0:
            M = theta[:, base + n + 2 * n * n + n * m:base + n + 3 * n * n + n * m].reshape(n_m, n, n)
            acc += np.einsum("mij,mj->mi", M, eps_prev[:, e0:e0 + n])
        acc += eps_now[:, e0:e0 + n]
        out[:, oi] = acc * scale[oi]
    if flags[3]:
        out[:, I_T] = x1[:, I_T] + h[H_DT]
    if flags[2]:
        out[:, I_TSGOUT] = x1[:, I_TSGOUT]
    if flags[0]:
        for i in range(n_m):
            out[i, I_NI], out[i, I_NXE] = _xenon_exact(x1[i, I_NI], x1[i, I_NXE], out[i, I_QRX], h[H_DT], h)
    if flags[1]:
        mp = out[:, I_MPP]
        ms = out[:, I_MPS]
        out[:, I_MC] = mp
        out[:, I_MS] = ms
        out[:, I_MSG] = ms
        out[:, I_DPP] = h[H_RP] * mp * mp
        out[:, I_DPS] = h[H_RS] * ms * ms
        vp = mp / h[H_RHOP]
        vs = ms / h[H_RHOS]
        out[:, I_NP] = np.sqrt(np.maximum(K_p * out[:, I_DPP] + h[H_BP] * vp * vp, 0.0) / h[H_AP])
        out[:, I_NS] = np.sqrt(np.maximum(K_s * out[:, I_DPS] + h[H_BS] * vs * vs, 0.0) / h[H_AS])


batch_step_kernel = _batch_step_nb if USE_NUMBA else _batch_step_np


@njit
def _rollout_nb(x2, x1, targets, theta, K_p, K_s, nx, nu, out_off, in_off, par_off, eps_off,
                out_idx, in_idx, in_lag, qs, flags, scale, u_scale, h, traj):
    """Noise-free rollout of one member along a target sequence."""
    n_eps = eps_off[eps_off.shape[0] - 1]
    zeros = np.zeros(n_eps)
    a = x2.copy()
    b = x1.copy()
    for k in range(targets.shape[0]):
        cur = b.copy()
        _member_step(a, b, targets[k], theta, zeros, zeros, K_p, K_s, nx, nu, out_off, in_off,
                     par_off, eps_off, out_idx, in_idx, in_lag, qs, flags, scale, u_scale, h, cur)
        for j in range(cur.shape[0]):
            if not math.isfinite(cur[j]):
                return k
        traj[k, :] = cur
        a = b
        b = cur
    return targets.shape[0]


def _layout_args(net: SurrogateNet):
    L = net.layout
    return (L.nx, L.nu, L.out_off, L.in_off, L.par_off, L.eps_off, L.out_idx, L.in_idx, L.in_lag,
            L.q, L.flags, net.scale, float(net.input_scale), net.hook_constants)


def surrogate_step_batch(net: SurrogateNet, x2, x1, target, K_p=1.0, K_s=1.0, theta=None,
                         eps_prev=None, eps_now=None) -> np.ndarray:
    """Advance many members at once; ``theta`` is (n_theta,) or (n_m, n_theta)."""
    x1 = np.ascontiguousarray(x1, dtype=float)
    x2 = np.ascontiguousarray(x2, dtype=float)
    if x1.ndim != 2 or x2.shape != x1.shape or x1.shape[1] != N_STATE:
        raise ValueError("lagged states must both be (n_m, 42)")
    n_m = x1.shape[0]
    th = net.theta() if theta is None else np.asarray(theta, dtype=float)
    th = np.ascontiguousarray(th.reshape(-1, net.layout.n_theta))
    if th.shape[0] not in (1, n_m):
        raise ValueError("theta rows must be 1 or n_m")
    ne = net.layout.n_eps
    ep = np.zeros((n_m, ne)) if eps_prev is None else np.ascontiguousarray(eps_prev, dtype=float)
    en = np.zeros((n_m, ne)) if eps_now is None else np.ascontiguousarray(eps_now, dtype=float)
    kp = np.broadcast_to(np.asarray(K_p, dtype=float), (n_m,)).copy()
    ks = np.broadcast_to(np.asarray(K_s, dtype=float), (n_m,)).copy()
    out = np.empty_like(x1)
    batch_step_kernel(x2, x1, float(target), th, ep, en, kp, ks, *_layout_args(net), out)
    return out


def surrogate_step(net: SurrogateNet, x2, x1, target, K_p=1.0, K_s=1.0, theta=None, eps=None) -> np.ndarray:
    """Advance one 5 s step from x(k-2), x(k-1) under target power ``target`` (W).

    ``eps`` optionally gives (eps(k-1), eps(k)) noise vectors; zeros otherwise.
    """
    if x2 is None or x1 is None:
        raise ValueError("both lagged states x(k-2) and x(k-1) are required")
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x1.shape != (N_STATE,) or x2.shape != (N_STATE,):
        raise ValueError("lagged states must have 42 entries")
    ep, en = (None, None) if eps is None else (np.atleast_2d(eps[0]), np.atleast_2d(eps[1]))
    out = surrogate_step_batch(net, x2[None], x1[None], target, K_p, K_s, theta, ep, en)[0]
    if not np.all(np.isfinite(out)):
        bad = [STATE_IDS[i] for i in np.flatnonzero(~np.isfinite(out))]
        raise SurrogateError(f"surrogate diverged: non-finite {bad}")
    return out


def rollout(net: SurrogateNet, x2, x1, targets, K_p=1.0, K_s=1.0, theta=None) -> np.ndarray:
    """Noise-free trajectory (len(targets), 42) from two seed states."""
    targets = np.ascontiguousarray(targets, dtype=float).reshape(-1)
    th = np.ascontiguousarray(net.theta() if theta is None else theta, dtype=float)
    traj = np.empty((targets.shape[0], N_STATE))
    x2 = np.asarray(x2, dtype=float).copy()
    x1 = np.asarray(x1, dtype=float).copy()
    if USE_NUMBA:
        done = _rollout_nb(x2, x1, targets, th, float(K_p), float(K_s), *_layout_args(net), traj)
    else:
        done = 0
        a, b = x2[None], x1[None]
        for k in range(targets.shape[0]):
            cur = surrogate_step_batch(net, a, b, targets[k], K_p, K_s, th)
            if not np.all(np.isfinite(cur)):
                break
            traj[k] = cur[0]
            a, b = b, cur
            done += 1
    if done < targets.shape[0]:
        raise SurrogateError(f"surrogate rollout diverged at step {done}")
    return traj

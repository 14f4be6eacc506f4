"""Stochastic ensemble Kalman filter over the augmented state [x(k-1), x(k), theta_A]."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from ._jit import USE_NUMBA, njit
from .surrogate.net import SurrogateNet, _batch_step_nb, _batch_step_np, _layout_args
from .surrogate.net import _member_step as _member_step_ref
from .variables import IDX, N_STATE

EXACT_GAMMA = 1e-30


class AssimilationError(RuntimeError):
    pass


class SingularInnovationError(AssimilationError):
    def __init__(self, message, condition):
        super().__init__(message)
        self.condition = condition


def _as_var(value, n):
    v = np.asarray(value, dtype=float)
    if v.ndim == 0:
        v = np.full(n, float(v))
    if v.shape != (n,):
        raise ValueError(f"expected a scalar or {n} variances")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValueError("variances must be finite and non-negative")
    return v


@dataclass(frozen=True)
class NoiseSpec:
    """Variances (diagonal covariances) for the filter.

    ``sigma`` applies to the newly predicted state rows, ``sigma_tau`` to the
    parameter random walk, ``c0_state``/``c0_param`` to the initial draw.
    All values are in units of ``state_scale`` (per state variable) and
    ``param_scale`` (per parameter), so that variances quoted for normalised
    variables carry over to raw-unit networks.
    """

    sigma: float = 1e-15
    sigma_tau: float = 1e-30
    c0_state: float = 1e-8
    c0_param: float = 1e-16
    state_scale: np.ndarray | None = None
    param_scale: np.ndarray | None = None
    tau_floor: float = 1e-300

    def __post_init__(self):
        for name in ("sigma", "sigma_tau", "c0_state", "c0_param"):
            v = np.asarray(getattr(self, name), dtype=float)
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be a finite, non-negative variance")

    def state_var(self, value):
        s = np.ones(N_STATE) if self.state_scale is None else np.asarray(self.state_scale, dtype=float)
        return _as_var(value, N_STATE) * s**2

    def param_var(self, value, n_p):
        s = np.ones(n_p) if self.param_scale is None else np.asarray(self.param_scale, dtype=float)
        return _as_var(value, n_p) * s**2

    def tau_var(self, n_p):
        # strictly positive random walk on parameter rows
        return np.maximum(self.param_var(self.sigma_tau, n_p), self.tau_floor)


@dataclass(frozen=True)
class ObservationModel:
    """Selection of observed variables; rows of H pick entries of x(k)."""

    ids: tuple
    n_params: int = 0

    def __post_init__(self):
        ids = tuple(self.ids)
        if not ids:
            raise ValueError("observation model needs at least one variable")
        bad = [v for v in ids if v not in IDX]
        if bad:
            raise KeyError(f"unknown observed variable(s): {bad}")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate observed variables")
        object.__setattr__(self, "ids", ids)

    @property
    def n_y(self):
        return len(self.ids)

    @property
    def rows(self) -> np.ndarray:
        return np.array([N_STATE + IDX[v] for v in self.ids], dtype=np.int64)

    def H(self) -> np.ndarray:
        H = np.zeros((self.n_y, 2 * N_STATE + self.n_params))
        H[np.arange(self.n_y), self.rows] = 1.0
        return H


@dataclass
class Ensemble:
    """Members are the columns of ``X`` (n_aug x n_m)."""

    X: np.ndarray
    theta_ids: tuple = ()
    theta_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    events: list = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.shape[0] != 2 * N_STATE + len(self.theta_ids):
            raise ValueError("ensemble rows do not match the augmented layout")

    @property
    def n_m(self):
        return self.X.shape[1]

    @property
    def n_p(self):
        return len(self.theta_ids)

    @property
    def prev_rows(self):
        return slice(0, N_STATE)

    @property
    def state_rows(self):
        return slice(N_STATE, 2 * N_STATE)

    @property
    def param_rows(self):
        return slice(2 * N_STATE, 2 * N_STATE + self.n_p)

    def mean(self) -> np.ndarray:
        return self.X.mean(axis=1)

    def anomalies(self) -> np.ndarray:
        return self.X - self.mean()[:, None]

    def covariance(self) -> np.ndarray:
        A = self.anomalies()
        return A @ A.T / (self.n_m - 1)

    def variance(self) -> np.ndarray:
        return self.X.var(axis=1, ddof=1)

    def state_mean(self) -> np.ndarray:
        return self.mean()[self.state_rows]

    def theta_mean(self) -> np.ndarray:
        return self.mean()[self.param_rows]

    def copy(self) -> "Ensemble":
        return Ensemble(self.X.copy(), self.theta_ids, self.theta_index.copy(), list(self.events))


def augmented_mean(x_prev, x_now, theta_a) -> np.ndarray:
    return np.concatenate([np.asarray(x_prev, float), np.asarray(x_now, float), np.asarray(theta_a, float)])


def init_ensemble(mean, noise: NoiseSpec, n_m: int, rng: np.random.Generator, theta_ids=(),
                  net: SurrogateNet | None = None) -> Ensemble:
    """Draw members from N(mean, blockdiag(C0_state, C0_state, C0_param)), re-centred on ``mean``."""
    if n_m < 2:
        raise ValueError("an ensemble needs at least two members")
    mean = np.asarray(mean, dtype=float)
    n_p = len(theta_ids)
    if mean.shape != (2 * N_STATE + n_p,):
        raise ValueError("mean does not match the augmented layout")
    sv = noise.state_var(noise.c0_state)
    var = np.concatenate([sv, sv, noise.param_var(noise.c0_param, n_p)])
    draws = rng.standard_normal((mean.size, n_m)) * np.sqrt(var)[:, None]
    draws -= draws.mean(axis=1, keepdims=True)
    X = mean[:, None] + draws
    idx = net.theta_index(theta_ids) if (net is not None and n_p) else np.zeros(0, dtype=np.int64)
    return Ensemble(X, tuple(theta_ids), idx)


@njit
def _predict_hour_nb(X2, X1, P, targets, noise_x, noise_p, base_theta, theta_index, K_p, K_s,
                     nx, nu, out_off, in_off, par_off, eps_off, out_idx, in_idx, in_lag, qs, flags,
                     scale, u_scale, h, traj_mean):
    """Run ``len(targets)`` predict steps in place; returns count of finite steps."""
    n_m = X1.shape[0]
    n_th = base_theta.shape[0]
    n_p = theta_index.shape[0]
    n_eps = eps_off[eps_off.shape[0] - 1]
    zeros = np.zeros(n_eps)
    th = np.empty((n_m, n_th))
    for i in range(n_m):
        for j in range(n_th):
            th[i, j] = base_theta[j]
    cur = np.empty(X1.shape[1])
    for k in range(targets.shape[0]):
        for i in range(n_m):
            for j in range(n_p):
                th[i, theta_index[j]] = P[i, j]
            for j in range(cur.shape[0]):
                cur[j] = X1[i, j]
            _member_step_ref(X2[i], X1[i], targets[k], th[i], zeros, zeros, K_p, K_s, nx, nu, out_off,
                             in_off, par_off, eps_off, out_idx, in_idx, in_lag, qs, flags, scale,
                             u_scale, h, cur)
            for j in range(cur.shape[0]):
                X2[i, j] = X1[i, j]
                X1[i, j] = cur[j] + noise_x[k, i, j]
            for j in range(n_p):
                P[i, j] += noise_p[k, i, j]
        for j in range(X1.shape[1]):
            s = 0.0
            for i in range(n_m):
                s += X1[i, j]
            traj_mean[k, j] = s / n_m
            if not np.isfinite(s):
                return k
    return targets.shape[0]



def _member_thetas(ens: Ensemble, net: SurrogateNet) -> np.ndarray:
    base = net.theta()
    th = np.repeat(base[None], ens.n_m, axis=0)
    if ens.n_p:
        th[:, ens.theta_index] = ens.X[ens.param_rows].T
    return th


def _redraw_divergent(ens: Ensemble, bad: np.ndarray, rng, inflation: float, t: float) -> None:
    good = ~bad
    if good.sum() < 2:
        raise AssimilationError("ensemble collapsed: fewer than two finite members")
    G = ens.X[:, good]
    mu = G.mean(axis=1)
    sd = G.std(axis=1, ddof=1) * inflation
    ens.X[:, bad] = mu[:, None] + sd[:, None] * rng.standard_normal((mu.size, int(bad.sum())))
    ens.events.append({"event": "member_redrawn", "t": t, "members": np.flatnonzero(bad).tolist()})


def predict(ens: Ensemble, net: SurrogateNet, target: float, noise: NoiseSpec, rng: np.random.Generator,
            K_p: float = 1.0, K_s: float = 1.0, inflation: float = 1.5) -> Ensemble:
    """One prediction step: every member runs the surrogate with its own theta_A."""
    out = ens.copy()
    x2 = np.ascontiguousarray(ens.X[ens.prev_rows].T)
    x1 = np.ascontiguousarray(ens.X[ens.state_rows].T)
    th = _member_thetas(ens, net)
    n_m = ens.n_m
    kp = np.full(n_m, float(K_p))
    ks = np.full(n_m, float(K_s))
    ne = net.layout.n_eps
    new = np.empty_like(x1)
    kern = _batch_step_nb if USE_NUMBA else _batch_step_np
    kern(x2, x1, float(target), th, np.zeros((n_m, ne)), np.zeros((n_m, ne)), kp, ks, *_layout_args(net), new)
    sv = noise.state_var(noise.sigma)
    if np.any(sv > 0):
        new += rng.standard_normal(new.shape) * np.sqrt(sv)
    out.X[ens.prev_rows] = x1.T
    out.X[ens.state_rows] = new.T
    if ens.n_p:
        out.X[ens.param_rows] += rng.standard_normal((ens.n_p, n_m)) * np.sqrt(noise.tau_var(ens.n_p))[:, None]
    bad = ~np.all(np.isfinite(out.X), axis=0)
    if bad.any():
        _redraw_divergent(out, bad, rng, inflation, float(np.nanmedian(x1[:, IDX["t"]])))
    return out


def predict_many(ens: Ensemble, net: SurrogateNet, targets, noise: NoiseSpec, rng: np.random.Generator,
                 K_p: float = 1.0, K_s: float = 1.0, inflation: float = 1.5):
    """Several prediction steps with no update in between.

    Returns the ensemble and the per-step ensemble-mean state. The random
    draws are made in the same order as repeated :func:`predict` calls, so
    both paths give identical results.
    """
    targets = np.asarray(targets, dtype=float).reshape(-1)
    n = targets.size
    if not USE_NUMBA or n == 0:
        means = np.empty((n, N_STATE))
        for k in range(n):
            ens = predict(ens, net, targets[k], noise, rng, K_p, K_s, inflation)
            means[k] = ens.state_mean()
        return ens, means
    n_m, n_p = ens.n_m, ens.n_p
    sv = np.sqrt(noise.state_var(noise.sigma))
    tv = np.sqrt(noise.tau_var(n_p)) if n_p else np.zeros(0)
    noise_x = np.zeros((n, n_m, N_STATE))
    noise_p = np.zeros((n, n_m, n_p))
    state_noise = bool(np.any(sv > 0))
    for k in range(n):
        if state_noise:
            noise_x[k] = rng.standard_normal((n_m, N_STATE)) * sv
        if n_p:
            noise_p[k] = (rng.standard_normal((n_p, n_m)) * tv[:, None]).T
    X2 = np.ascontiguousarray(ens.X[ens.prev_rows].T)
    X1 = np.ascontiguousarray(ens.X[ens.state_rows].T)
    P = np.ascontiguousarray(ens.X[ens.param_rows].T)
    means = np.empty((n, N_STATE))
    done = _predict_hour_nb(X2, X1, P, targets, noise_x, noise_p, net.theta(), ens.theta_index,
                            float(K_p), float(K_s), *_layout_args(net), means)
    out = ens.copy()
    out.X[ens.prev_rows] = X2.T
    out.X[ens.state_rows] = X1.T
    out.X[ens.param_rows] = P.T
    if done < n:
        bad = ~np.all(np.isfinite(out.X), axis=0)
        _redraw_divergent(out, bad, rng, inflation, float(means[max(done - 1, 0), IDX["t"]]))
        rest, more = predict_many(out, net, targets[done + 1:], noise, rng, K_p, K_s, inflation)
        means[done] = out.state_mean()
        means[done + 1:] = more
        return rest, means
    return out, means


def _gamma_matrix(gamma, n_y, gamma_scale=None):
    G = np.asarray(gamma, dtype=float)
    G = np.diag(np.full(n_y, float(G))) if G.ndim == 0 else (np.diag(G) if G.ndim == 1 else G)
    if gamma_scale is not None:
        s = np.asarray(gamma_scale, dtype=float)
        G = G * np.outer(s, s)
    if G.shape != (n_y, n_y):
        raise ValueError("gamma has the wrong shape")
    return G


def analysis(X, H, d, gamma, rng: np.random.Generator, jitter: float = 1e-12, innovation: str = "perturbed",
             events: list | None = None, mask=None, inflation: float = 1.0) -> np.ndarray:
    """Ensemble Kalman analysis of the member matrix ``X`` (n x n_m).

    K = Xa Ya^T (Ya Ya^T)^-1 with both products over (n_m - 1), where
    Y = H X + E and E ~ N(0, gamma) is centred across members. Variances
    below 1e-30 count as exact observations (E = 0). ``innovation`` selects
    d - Y ("perturbed", Kalman-consistent spread) or d - H X ("mean").
    A near-singular innovation covariance gets one jitter of ``jitter`` times
    its mean diagonal; if that does not fix it the call fails.

    Optional, both off by default: ``inflation`` scales the prior anomalies
    about the mean before the gain is formed, and ``mask`` (n x n_y, entries
    in [0, 1]) is multiplied into the gain entry by entry (localization).
    """
    X = np.asarray(X, dtype=float)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    d = np.asarray(d, dtype=float).reshape(-1)
    n_y, n_m = H.shape[0], X.shape[1]
    if d.shape != (n_y,):
        raise ValueError(f"measurement has {d.size} entries, observation model expects {n_y}")
    if n_m < 2:
        raise ValueError("analysis needs at least two members")
    if not inflation > 0:
        raise ValueError("inflation must be positive")
    if inflation != 1.0:
        mu = X.mean(axis=1, keepdims=True)
        X = mu + inflation * (X - mu)
    G = _gamma_matrix(gamma, n_y)
    HX = H @ X
    if np.all(np.abs(G) < EXACT_GAMMA):
        E = np.zeros((n_y, n_m))
    else:
        w, V = np.linalg.eigh(0.5 * (G + G.T))
        if w.min() < -1e-12 * max(1.0, abs(w).max()):
            raise ValueError("gamma must be positive semi-definite")
        E = (V * np.sqrt(np.clip(w, 0, None))) @ rng.standard_normal((n_y, n_m))
        E -= E.mean(axis=1, keepdims=True)
    Y = HX + E
    Xa = X - X.mean(axis=1, keepdims=True)
    Ya = Y - Y.mean(axis=1, keepdims=True)
    S = Ya @ Ya.T / (n_m - 1)
    C = Xa @ Ya.T / (n_m - 1)
    cond = np.linalg.cond(S) if np.all(np.isfinite(S)) else np.inf
    if not np.isfinite(cond) or cond > 1e14:
        tr = float(np.trace(S)) / n_y
        if not tr > 0:
            raise SingularInnovationError(
                f"innovation covariance is singular (condition {cond:.3g}); ensemble collapsed in observed rows", cond)
        S = S + jitter * tr * np.eye(n_y)
        cond2 = np.linalg.cond(S)
        if events is not None:
            events.append({"event": "innovation_jitter", "condition": float(cond), "after": float(cond2)})
        if cond2 > 1e14:
            raise SingularInnovationError(f"innovation covariance singular after jitter (condition {cond2:.3g})", cond2)
    K = np.linalg.solve(S.T, C.T).T
    if mask is not None:
        mask = np.asarray(mask, dtype=float)
        if mask.shape != K.shape:
            raise ValueError(f"localization mask must have shape {K.shape}")
        K = K * mask
    resid = d[:, None] - (Y if innovation == "perturbed" else HX)
    return X + K @ resid


def update(ens: Ensemble, d, obs: ObservationModel, gamma, rng: np.random.Generator,
           jitter: float = 1e-12, innovation: str = "perturbed", gamma_scale=None, mask=None,
           inflation: float = 1.0) -> Ensemble:
    """Analysis step on the augmented ensemble; see :func:`analysis`.

    ``gamma_scale`` multiplies gamma by the squared scale of each observed variable.
    """
    G = _gamma_matrix(gamma, obs.n_y, gamma_scale)
    out = ens.copy()
    H = np.zeros((obs.n_y, ens.X.shape[0]))
    H[np.arange(obs.n_y), obs.rows] = 1.0
    out.X = analysis(ens.X, H, d, G, rng, jitter, innovation, out.events, mask, inflation)
    return out


def block_mask(net: SurrogateNet, obs: ObservationModel, n_params: int) -> np.ndarray:
    """Localization mask: each observation may move only the variables its
    surrogate block produces (both lags) and the parameter rows."""
    M = np.zeros((2 * N_STATE + n_params, obs.n_y))
    owner = {v: b for b in net.blocks for v in b.outputs}
    for j, v in enumerate(obs.ids):
        near = owner[v].outputs if v in owner else (v,)
        for u in near:
            M[IDX[u], j] = M[N_STATE + IDX[u], j] = 1.0
        M[2 * N_STATE:, j] = 1.0
    return M


def write_theta(net: SurrogateNet, ens: Ensemble) -> SurrogateNet:
    """Put the posterior-mean theta_A back into the network."""
    if not ens.n_p:
        return net
    theta = net.theta()
    theta[ens.theta_index] = ens.theta_mean()
    return net.with_theta(theta)


def assimilate_step(ens: Ensemble, net: SurrogateNet, target: float, d, obs: ObservationModel,
                    noise: NoiseSpec, gamma, rng: np.random.Generator, K_p=1.0, K_s=1.0, gamma_scale=None):
    """Predict, update when a measurement is present, write theta_A back.

    Returns (ensemble, posterior mean, posterior spread, network).
    """
    ens = predict(ens, net, target, noise, rng, K_p, K_s)
    if d is not None:
        ens = update(ens, d, obs, gamma, rng, gamma_scale=gamma_scale)
        net = write_theta(net, ens)
    return ens, ens.mean(), ens.X.std(axis=1, ddof=1), net


@dataclass
class AssimilationLog:
    """Per-observation posterior summaries."""

    theta_ids: tuple = ()
    observed: tuple = ()
    records: list = field(default_factory=list)

    def record(self, t, ens: Ensemble, d, prior_var_obs, prior_obs=None):
        m = ens.state_mean()
        v = ens.X[ens.state_rows].var(axis=1, ddof=1)
        self.records.append({
            "t": float(t),
            "d": [float(x) for x in np.atleast_1d(d)],
            "posterior_obs": [float(m[IDX[o]]) for o in self.observed],
            "posterior_mean": [float(x) for x in m],
            "prior_var_obs": [float(x) for x in np.atleast_1d(prior_var_obs)],
            "prior_obs": [] if prior_obs is None else [float(x) for x in np.atleast_1d(prior_obs)],
            "posterior_var_obs": [float(v[IDX[o]]) for o in self.observed],
            "theta_mean": ens.theta_mean().tolist(),
            "theta_var": ens.X[ens.param_rows].var(axis=1, ddof=1).tolist(),
        })

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump({"theta_ids": list(self.theta_ids), "observed": list(self.observed),
                       "records": self.records}, fh, indent=1)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            head = ["t"]
            for o in self.observed:
                head += [f"d_{o}", f"mean_{o}", f"prior_var_{o}", f"post_var_{o}"]
            for p in self.theta_ids:
                head += [f"mean_{p}", f"var_{p}"]
            w.writerow(head)
            for r in self.records:
                row = [r["t"]]
                for i in range(len(self.observed)):
                    row += [r["d"][i], r["posterior_obs"][i], r["prior_var_obs"][i], r["posterior_var_obs"][i]]
                for i in range(len(self.theta_ids)):
                    row += [r["theta_mean"][i], r["theta_var"][i]]
                w.writerow(["%.17g" % x for x in row])

"""VARMAX(p, q) blocks with exogenous input: parameters, prediction, fitting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class VarmaxFitError(ValueError):
    pass


class RankDeficientError(VarmaxFitError):
    """Regression matrix lacks excitation; ``directions`` names the culprits."""

    def __init__(self, message, directions):
        super().__init__(message)
        self.directions = directions


@dataclass
class VarmaxParams:
    """One block: x(k) = a + sum A_i x(k-i) + B u(k) + sum M_j eps(k-j)."""

    a: np.ndarray
    A: tuple
    B: np.ndarray
    M: tuple
    omega: np.ndarray
    diagonal_omega: bool = False
    report: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float).reshape(-1)
        n = self.a.shape[0]
        self.A = tuple(np.asarray(m, dtype=float).reshape(n, n) for m in self.A)
        self.M = tuple(np.asarray(m, dtype=float).reshape(n, n) for m in self.M)
        B = np.asarray(self.B, dtype=float)
        self.B = B.reshape(n, -1) if n else B.reshape(0, B.shape[-1] if B.ndim == 2 else 0)
        self.omega = np.asarray(self.omega, dtype=float).reshape(n, n)
        if self.diagonal_omega and np.any(self.omega - np.diag(np.diag(self.omega))):
            raise ValueError("omega declared diagonal but has off-diagonal entries")
        if n and np.linalg.eigvalsh(0.5 * (self.omega + self.omega.T)).min() < -1e-12 * max(
            1.0, np.abs(self.omega).max()
        ):
            raise ValueError("omega must be positive semi-definite")

    @property
    def p(self):
        return len(self.A)

    @property
    def q(self):
        return len(self.M)

    @property
    def n_x(self):
        return self.a.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]

    def terms(self) -> int:
        """Literal count of free scalars (Omega counted as a symmetric matrix)."""
        n = self.n_x
        count = self.a.size + sum(m.size for m in self.A) + self.B.size + sum(m.size for m in self.M)
        count += n if self.diagonal_omega else n * (n + 1) // 2
        return count

    @classmethod
    def zeros(cls, n_x, n_u, p=2, q=1, diagonal_omega=False):
        return cls(np.zeros(n_x), tuple(np.zeros((n_x, n_x)) for _ in range(p)), np.zeros((n_x, n_u)),
                   tuple(np.zeros((n_x, n_x)) for _ in range(q)), np.zeros((n_x, n_x)), diagonal_omega)

    def flat(self) -> np.ndarray:
        """[a, A_1.., B, M_1..] row-major; Omega is not part of the dynamics vector."""
        parts = [self.a] + [m.ravel() for m in self.A] + [self.B.ravel()] + [m.ravel() for m in self.M]
        return np.concatenate(parts) if parts else np.zeros(0)

    def flat_names(self, prefix=""):
        n, nu = self.n_x, self.n_u
        names = [f"{prefix}a,{i}" for i in range(n)]
        for lag in range(self.p):
            names += [f"{prefix}A{lag + 1},{i},{j}" for i in range(n) for j in range(n)]
        names += [f"{prefix}B,{i},{j}" for i in range(n) for j in range(nu)]
        for lag in range(self.q):
            names += [f"{prefix}M{lag + 1},{i},{j}" for i in range(n) for j in range(n)]
        return names

    def with_flat(self, theta) -> "VarmaxParams":
        theta = np.asarray(theta, dtype=float)
        n, nu = self.n_x, self.n_u
        pos = 0

        def take(size, shape):
            nonlocal pos
            out = theta[pos:pos + size].reshape(shape)
            pos += size
            return out

        a = take(n, (n,))
        A = tuple(take(n * n, (n, n)) for _ in range(self.p))
        B = take(n * nu, (n, nu))
        M = tuple(take(n * n, (n, n)) for _ in range(self.q))
        if pos != theta.size:
            raise ValueError("flat parameter vector has the wrong length")
        return VarmaxParams(a, A, B, M, self.omega.copy(), self.diagonal_omega, dict(self.report))

    def to_dict(self):
        return {"a": self.a.tolist(), "A": [m.tolist() for m in self.A], "B": self.B.tolist(),
                "M": [m.tolist() for m in self.M], "omega": self.omega.tolist(),
                "diagonal_omega": self.diagonal_omega}

    @classmethod
    def from_dict(cls, d):
        n = len(d["a"])
        B = np.asarray(d["B"], dtype=float).reshape(n, -1)
        return cls(np.asarray(d["a"]), tuple(np.asarray(m) for m in d["A"]), B,
                   tuple(np.asarray(m) for m in d["M"]), np.asarray(d["omega"]), d["diagonal_omega"])


def spectral_radius(params: "VarmaxParams") -> float:
    """Largest |eigenvalue| of the state companion matrix (1.0 or more: not stable)."""
    n, p = params.n_x, params.p
    if n == 0 or p == 0:
        return 0.0
    C = np.zeros((n * p, n * p))
    C[:n, :] = np.hstack(list(params.A))
    if p > 1:
        C[n:, :-n] = np.eye(n * (p - 1))
    return float(np.abs(np.linalg.eigvals(C)).max())


def count_params(p: int, q: int, n_x: int, n_u: int, diagonal_omega: bool) -> int:
    """Free-parameter count of a VARMAX(p, q) block with ``n_u`` inputs."""
    if min(p, q, n_x, n_u) < 0:
        raise ValueError("orders and dimensions must be non-negative")
    if diagonal_omega:
        return (p + q) * n_x * n_x + (2 + n_u) * n_x
    # (p + q + 1/2) n^2 + (3/2 + n_u) n, kept in integers
    return (p + q) * n_x * n_x + n_u * n_x + (n_x * n_x + 3 * n_x) // 2


def varmax_predict(params: VarmaxParams, lags, u, errors=()) -> np.ndarray:
    """One-step prediction; ``lags[0]`` is x(k-1), ``errors[0]`` is eps(k-1)."""
    lags = list(lags)
    errors = list(errors)
    if len(lags) != params.p:
        raise ValueError(f"expected {params.p} lagged states, got {len(lags)}")
    if len(errors) != params.q:
        raise ValueError(f"expected {params.q} noise vectors, got {len(errors)}")
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape[0] != params.n_u:
        raise ValueError(f"input has {u.shape[0]} entries, block expects {params.n_u}")
    out = params.a.copy()
    for A, x in zip(params.A, lags):
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != params.n_x:
            raise ValueError("lagged state dimension mismatch")
        out += A @ x
    out += params.B @ u
    for M, e in zip(params.M, errors):
        e = np.asarray(e, dtype=float).reshape(-1)
        if e.shape[0] != params.n_x:
            raise ValueError("noise vector dimension mismatch")
        out += M @ e
    return out


# --------------------------------------------------------------------------- fitting


def _as_list(series):
    if isinstance(series, np.ndarray):
        return [series]
    return list(series)


def _design(xs, us, p, q, eps, start):
    """Stack regressors [x(k-1..k-p), u(k), eps(k-1..k-q)] and targets for k >= start."""
    rows, targets = [], []
    for x, u, e in zip(xs, us, eps):
        T = x.shape[0]
        if T <= start:
            continue
        cols = [x[start - i:T - i] for i in range(1, p + 1)]
        cols.append(u[start:T])
        if q:
            cols += [e[start - j:T - j] for j in range(1, q + 1)]
        rows.append(np.hstack(cols))
        targets.append(x[start:T])
    if not rows:
        return None, None
    return np.vstack(rows), np.vstack(targets)


def _solve(X, Y, intercept, names, ridge=0.0, rcond=1e-10):
    """Least squares on standardised, non-constant columns; returns (coef, const)."""
    mean = X.mean(axis=0) if intercept else np.zeros(X.shape[1])
    std = X.std(axis=0)
    scale = np.abs(X).max(axis=0)
    live = std > 1e-12 * np.maximum(scale, 1e-300) if intercept else scale > 0
    coef = np.zeros((X.shape[1], Y.shape[1]))
    ymean = Y.mean(axis=0) if intercept else np.zeros(Y.shape[1])
    if live.any():
        norm = std[live] if intercept else np.sqrt((X[:, live] ** 2).mean(axis=0))
        Z = (X[:, live] - mean[live]) / norm
        s = np.linalg.svd(Z, compute_uv=False)
        if s[-1] <= rcond * s[0] and ridge == 0.0:
            _, _, vt = np.linalg.svd(Z, full_matrices=False)
            live_names = [n for n, keep in zip(names, live) if keep]
            bad = [
                {live_names[j]: float(v[j]) for j in np.argsort(-np.abs(v))[:4] if abs(v[j]) > 1e-3}
                for v, sv in zip(vt, s) if sv <= rcond * s[0]
            ]
            raise RankDeficientError(
                f"rank-deficient regression ({int(np.sum(s <= rcond * s[0]))} null directions); "
                f"insufficient excitation in {bad}", bad)
        if ridge > 0.0:
            G = Z.T @ Z + ridge * Z.shape[0] * np.eye(Z.shape[1])
            w = np.linalg.solve(G, Z.T @ (Y - ymean))
        else:
            w, *_ = np.linalg.lstsq(Z, Y - ymean, rcond=None)
        coef[live] = w / norm[:, None]
    const = ymean - mean @ coef
    return coef, const


def fit_varmax(series, inputs, p: int = 2, q: int = 1, diagonal_omega: bool = False,
               holdout: float = 0.1, anchor=None, ar_order: int | None = None,
               ridge: float = 0.0) -> VarmaxParams:
    """Two-stage least-squares VARMAX fit.

    Stage one fits a long autoregression whose residuals stand in for the
    unobserved noise; stage two regresses on lags, inputs and those residuals.
    ``series``/``inputs`` may be single (T, n) arrays or lists of segments.
    ``anchor=(x_ref, u_ref)`` pins the intercept so that (x_ref, u_ref) is an
    exact fixed point of the noise-free model. The last ``holdout`` fraction of
    each segment is scored (recursive innovations) and reported.
    """
    xs = [np.asarray(x, dtype=float) for x in _as_list(series)]
    us = [np.asarray(u, dtype=float) for u in _as_list(inputs)]
    if len(xs) != len(us):
        raise VarmaxFitError("series and inputs must have the same number of segments")
    xs = [x[:, None] if x.ndim == 1 else x for x in xs]
    us = [u[:, None] if u.ndim == 1 else u for u in us]
    for x, u in zip(xs, us):
        if x.shape[0] != u.shape[0]:
            raise VarmaxFitError("series and inputs must have equal length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise VarmaxFitError("series contains missing or non-finite samples")
    n_x, n_u = xs[0].shape[1], us[0].shape[1]
    n_par = count_params(p, q, n_x, n_u, diagonal_omega)
    total = sum(x.shape[0] for x in xs)
    if total < 2 * n_par or total < 10:
        raise VarmaxFitError(f"series of {total} samples is too short for {n_par} parameters")

    train_x, train_u, test_x, test_u = [], [], [], []
    for x, u in zip(xs, us):
        cut = x.shape[0] - int(round(holdout * x.shape[0]))
        train_x.append(x[:cut])
        train_u.append(u[:cut])
        test_x.append(x)
        test_u.append(u)

    if anchor is not None:
        x_ref = np.asarray(anchor[0], dtype=float).reshape(n_x)
        u_ref = np.asarray(anchor[1], dtype=float).reshape(n_u)
        fx = [x - x_ref for x in train_x]
        fu = [u - u_ref for u in train_u]
    else:
        fx, fu = train_x, train_u
    intercept = anchor is None

    # stage one: long autoregression for a noise proxy
    L = ar_order or max(p + q + 3, 6)
    names_ar = [f"x{j}(k-{i})" for i in range(1, L + 1) for j in range(n_x)] + [f"u{j}" for j in range(n_u)]
    X1, Y1 = _design(fx, fu, L, 0, [None] * len(fx), L)
    if X1 is None:
        raise VarmaxFitError("series too short for the noise-proxy autoregression")
    eps = []
    if q:
        c1, k1 = _solve(X1, Y1, intercept, names_ar, ridge=max(ridge, 1e-10))
        for x, u in zip(fx, fu):
            e = np.zeros_like(x)
            X, Y = _design([x], [u], L, 0, [None], L)
            if X is not None:
                e[L:] = Y - (X @ c1 + k1)
            eps.append(e)
    else:
        eps = [np.zeros_like(x) for x in fx]

    # stage two
    names = ([f"x{j}(k-{i})" for i in range(1, p + 1) for j in range(n_x)]
             + [f"u{j}(k)" for j in range(n_u)]
             + [f"eps{j}(k-{i})" for i in range(1, q + 1) for j in range(n_x)])
    X2, Y2 = _design(fx, fu, p, q, eps, L + q)
    if X2 is None:
        raise VarmaxFitError("series too short for the joint regression")
    coef, const = _solve(X2, Y2, intercept, names, ridge=ridge)
    resid = Y2 - (X2 @ coef + const)
    W = coef.T
    A = tuple(W[:, i * n_x:(i + 1) * n_x] for i in range(p))
    B = W[:, p * n_x:p * n_x + n_u]
    M = tuple(W[:, p * n_x + n_u + j * n_x:p * n_x + n_u + (j + 1) * n_x] for j in range(q))
    if anchor is not None:
        a = x_ref - sum(Ai @ x_ref for Ai in A) - B @ u_ref
    else:
        a = const
    omega = np.cov(resid.T, bias=True).reshape(n_x, n_x) if resid.shape[0] > 1 else np.zeros((n_x, n_x))
    omega = 0.5 * (omega + omega.T)
    if diagonal_omega:
        omega = np.diag(np.diag(omega))
    params = VarmaxParams(a, A, B, M, omega, diagonal_omega)

    # held-out one-step score; the noise proxy comes from the stage-one model
    sq = np.zeros(n_x)
    count = 0
    for x, u, xt in zip(test_x, test_u, train_x):
        cut = max(xt.shape[0], L + q)
        if anchor is not None:
            x, u = x - x_ref, u - u_ref
        e = np.zeros_like(x)
        if q:
            X, Y = _design([x], [u], L, 0, [None], L)
            if X is not None:
                e[L:] = Y - (X @ c1 + k1)
        X, Y = _design([x], [u], p, q, [e], L + q)
        if X is None:
            continue
        err = (Y - (X @ coef + const))[cut - (L + q):]
        sq += (err**2).sum(axis=0)
        count += err.shape[0]
    rmse = np.sqrt(sq / count) if count else np.full(n_x, np.nan)
    params.report = {
        "estimator": "two-stage least squares",
        "p": p, "q": q, "n_x": n_x, "n_u": n_u,
        "n_params": n_par,
        "n_train": int(X2.shape[0]),
        "n_holdout": int(count),
        "train_rmse": np.sqrt((resid**2).mean(axis=0)).tolist(),
        "holdout_rmse": rmse.tolist(),
    }
    return params

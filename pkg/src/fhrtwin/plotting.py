"""SVG figures for run logs and sensitivity studies (deterministic output)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "fhrtwin"


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def sobol_bars(ids, S, ST, S_conf, ST_conf, output, path):
    n = len(ids)
    fig, ax = plt.subplots(figsize=(max(6, 0.22 * n), 3.5))
    x = np.arange(n)
    ax.bar(x - 0.2, S, 0.4, yerr=S_conf, label="first order", capsize=1)
    ax.bar(x + 0.2, ST, 0.4, yerr=ST_conf, label="total order", capsize=1)
    ax.set_xticks(x)
    ax.set_xticklabels(ids, rotation=90, fontsize=6)
    ax.set_ylabel("index")
    ax.set_title(f"Sobol indices for {output}")
    ax.legend()
    return _save(fig, path)


def power_health(t_hours, demand, power, eta_p, eta_s, path, eta_min=0.2):
    """Power tracking on top, pump health indices below."""
    fig, (a, b) = plt.subplots(2, 1, figsize=(9, 5.5), sharex=True)
    a.plot(t_hours, np.asarray(demand) / 1e6, lw=0.6, label="demand")
    a.plot(t_hours, np.asarray(power) / 1e6, lw=0.6, label="core power")
    a.set_ylabel("MW")
    a.legend(loc="lower right")
    b.plot(t_hours, eta_p, label="primary pump")
    b.plot(t_hours, eta_s, label="secondary pump")
    b.axhline(eta_min, color="k", ls="--", lw=0.6)
    b.set_ylabel("health index")
    b.set_xlabel("time (h)")
    b.legend(loc="lower left")
    return _save(fig, path)


def error_variance(t_hours, error_pct, t_obs, variance, path, label="Q_RX"):
    """Twin error against truth above, observed-variable ensemble variance below."""
    fig, (a, b) = plt.subplots(2, 1, figsize=(9, 5.5), sharex=True)
    a.plot(t_hours, error_pct, lw=0.6)
    a.set_ylabel(f"{label} error (%)")
    b.semilogy(t_obs, np.maximum(variance, 1e-300), marker=".", lw=0.6)
    b.set_ylabel("ensemble variance")
    b.set_xlabel("time (h)")
    return _save(fig, path)


def parameter_panels(t_obs, means, variances, ids, path):
    means = np.atleast_2d(np.asarray(means, dtype=float))
    variances = np.atleast_2d(np.asarray(variances, dtype=float))
    fig, (a, b) = plt.subplots(2, 1, figsize=(9, 5.5), sharex=True)
    for j, pid in enumerate(ids):
        a.step(t_obs, means[:, j] - means[0, j], where="post", lw=0.7, label=pid)
        b.semilogy(t_obs, np.maximum(variances[:, j], 1e-300), lw=0.7)
    a.set_ylabel("mean change")
    if len(ids) <= 10:
        a.legend(fontsize=6, ncol=2)
    b.set_ylabel("variance")
    b.set_xlabel("time (h)")
    return _save(fig, path)


def tracks(t_hours, series: dict, path, ylabel=""):
    fig, ax = plt.subplots(figsize=(9, 3.5))
    for name, y in series.items():
        ax.plot(t_hours, y, lw=0.7, label=name)
    ax.set_ylabel(ylabel)
    ax.set_xlabel("time (h)")
    ax.legend(fontsize=7)
    return _save(fig, path)

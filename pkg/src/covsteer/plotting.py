"""Static figures (Agg backend): trajectory with ellipses, mass, thrust."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from covsteer.dynamics import AU_KM, DAY, NEWTON  # noqa: E402
from covsteer.report import emit_ellipses  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_trajectory(path, times, means, covariances, ensemble=None, scale: float = 10.0,
                    confidence: float = 0.95):
    """Position and velocity planes (x-y) with scaled confidence ellipses.

    Args:
        path: output file; the extension selects the format.
        times: node times in seconds.
        means, covariances: node means and covariances in km, km/s, kg.
        ensemble: optional Monte Carlo ensemble drawn as gray dots.
        scale: ellipse magnification.
    """
    n_x = means.shape[1]
    d = (n_x - 1) // 2
    fig, axes = plt.subplots(1, 2, figsize=(11, 5))
    for ax, off, unit, label in ((axes[0], 0, AU_KM, "AU"), (axes[1], d, 1.0, "km/s")):
        idx = [off, off + 1]
        m = means[:, idx]
        S = covariances[:, idx][:, :, idx]
        if ensemble is not None:
            pts = ensemble.valid[:, :, idx].reshape(-1, 2) / unit
            ax.plot(pts[:, 0], pts[:, 1], ".", color="0.7", ms=1, zorder=0)
        ax.plot(m[:, 0] / unit, m[:, 1] / unit, "k-", lw=1)
        ok = np.linalg.eigvalsh(S)[:, 0] > 1e-12 * np.maximum(np.linalg.eigvalsh(S)[:, 1], 1e-300)
        if np.any(ok):
            for poly in emit_ellipses(S[ok], m[ok], confidence, scale):
                closed = np.vstack([poly, poly[:1]]) / unit
                ax.plot(closed[:, 0], closed[:, 1], "b-", lw=0.6)
        ax.set_xlabel(f"x [{label}]")
        ax.set_ylabel(f"y [{label}]")
        ax.set_aspect("equal", adjustable="datalim")
    axes[0].plot([0], [0], "o", color="orange")
    axes[0].set_title(f"position, ellipses x{scale:g}")
    axes[1].set_title(f"velocity, ellipses x{scale:g}")
    _save(fig, path)


def plot_mass(path, times, mass, mass_std, ensemble=None):
    """Mean mass and its standard deviation against time."""
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    days = np.asarray(times) / DAY
    axes[0].plot(days, mass, "k-", label="predicted")
    axes[1].plot(days, mass_std, "k-", label="predicted")
    if ensemble is not None:
        X = ensemble.valid[:, :, -1]
        axes[0].plot(days, X.mean(axis=0), "r--", label="Monte Carlo")
        axes[1].plot(days, X.std(axis=0, ddof=1), "r--", label="Monte Carlo")
        axes[0].legend()
        axes[1].legend()
    axes[0].set_ylabel("mass [kg]")
    axes[1].set_ylabel("mass std [kg]")
    for ax in axes:
        ax.set_xlabel("time [day]")
    _save(fig, path)


def plot_thrust(path, times, feedforward, u_max, ensemble=None):
    """Feedforward thrust magnitude with optional Monte Carlo control samples."""
    fig, ax = plt.subplots(figsize=(7, 4))
    days = np.asarray(times) / DAY
    if ensemble is not None:
        norms = np.linalg.norm(ensemble.commanded[~ensemble.flagged], axis=-1) / NEWTON
        for row in norms[: min(len(norms), 200)]:
            ax.step(days[:-1], row, where="post", color="0.75", lw=0.4)
    ax.step(days[:-1], np.linalg.norm(feedforward, axis=1) / NEWTON, where="post", color="k")
    ax.axhline(u_max / NEWTON, color="r", ls=":", lw=1)
    ax.set_xlabel("time [day]")
    ax.set_ylabel("thrust [N]")
    _save(fig, path)


def plot_comparison(path, times, traces, thrusts, labels=("stochastic mass", "deterministic mass")):
    """Position-covariance trace and thrust for the two mass models."""
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    days = np.asarray(times) / DAY
    for tr, th, lab, style in zip(traces, thrusts, labels, ("k-", "r--")):
        axes[0].plot(days, tr, style, label=lab)
        axes[1].step(days[:-1], th, style, where="post", label=lab)
    axes[0].set_ylabel("trace of position covariance [km^2]")
    axes[1].set_ylabel("feedforward thrust [N]")
    for ax in axes:
        ax.set_xlabel("time [day]")
        ax.legend()
    _save(fig, path)

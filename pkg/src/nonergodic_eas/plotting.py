"""Report figures.  Everything renders off-screen to image files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .model import HYPER_NAMES  # noqa: E402

DPI = 110


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def plot_smoothing(smoothed, path):
    """Phase-1 posterior means against the smoothed values, one panel each."""
    fig, axes = plt.subplots(2, 4, figsize=(13, 6), sharex=True)
    fine = np.exp(np.linspace(*np.log(smoothed.freqs[[0, -1]]), 100))
    for ax, k in zip(axes.ravel(), HYPER_NAMES):
        if k in smoothed.raw:
            ax.plot(smoothed.freqs, smoothed.raw[k], "o", color="0.4", label="phase 1")
        ax.plot(fine, [getattr(smoothed.at(f), k) for f in fine], "-", color="C3", label="smoothed")
        ax.set_xscale("log")
        ax.set_title(k, fontsize=10)
    axes[0, 0].legend(fontsize=8)
    for ax in axes[1]:
        ax.set_xlabel("frequency (Hz)")
    return _save(fig, path)


def plot_coefficients(fitted, path):
    """Cell attenuation over the grid and site terms at the stations."""
    g = fitted.grid
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(11, 4.8))
    cells = fitted.cell_means().reshape(g.ny, g.nx)
    im = a1.imshow(cells, origin="lower", cmap="viridis_r",
                   extent=(g.origin.x, g.x_max, g.origin.y, g.y_max))
    fig.colorbar(im, ax=a1, label="c_ca (1/km)")
    a1.set_title(f"cell attenuation, {fitted.freq:g} Hz", fontsize=10)
    xy = fitted.dc1as.known_xy
    sc = a2.scatter(xy[:, 0], xy[:, 1], c=fitted.dc1as.posterior_mean, cmap="RdBu_r", s=18)
    fig.colorbar(sc, ax=a2, label="dc1as")
    a2.set_xlim(g.origin.x, g.x_max)
    a2.set_ylim(g.origin.y, g.y_max)
    a2.set_title("site term at stations", fontsize=10)
    for ax in (a1, a2):
        ax.set_xlabel("x (km)")
        ax.set_ylabel("y (km)")
        ax.set_aspect("equal")
    return _save(fig, path)


def plot_aleatory(model, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    fine = np.exp(np.linspace(*np.log(model.freqs[[0, -1]]), 200))
    for i, k in enumerate(("tau0", "phi0_m1", "phi0_m2")):
        ax.plot(model.freqs, model.raw[k], "o", color=f"C{i}", ms=4)
        ax.plot(fine, model.smoothed(k, fine), "-", color=f"C{i}", label=k)
    ax.set_xscale("log")
    ax.set_xlabel("frequency (Hz)")
    ax.set_ylabel("standard deviation (ln units)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_correlations(models: dict, empirical: dict, path):
    """Fisher-z data against the fitted decay curve for each term."""
    terms = sorted(models)
    fig, axes = plt.subplots(1, max(len(terms), 1), figsize=(3.6 * max(len(terms), 1), 3.4),
                             squeeze=False)
    for ax, t in zip(axes[0], terms):
        fr = np.linspace(1e-3, 5.0, 200)
        emp = empirical.get(t)
        if emp is not None and len(emp.rho):
            ax.plot(emp.fr, emp.rho, ".", color="0.5", ms=4)
        ax.plot(fr, models[t].rho(fr), "-", color="C3")
        ax.set_ylim(-0.2, 1.02)
        ax.set_xlabel("|ln(f1/f2)|")
        ax.set_title(t, fontsize=10)
    axes[0, 0].set_ylabel("correlation")
    return _save(fig, path)


def plot_map(df, term: str, freq: float, path):
    """Conditioned mean and sd of one coefficient on a regular grid."""
    fig, axes = plt.subplots(1, 2, figsize=(11, 4.6))
    for ax, col, cmap in zip(axes, ("mean", "sd"), ("RdBu_r", "magma")):
        sc = ax.scatter(df["x_km"], df["y_km"], c=df[col], cmap=cmap, s=8, marker="s")
        fig.colorbar(sc, ax=ax, label=col)
        ax.set_title(f"{term} {col}, {freq:g} Hz", fontsize=10)
        ax.set_xlabel("x (km)")
        ax.set_ylabel("y (km)")
        ax.set_aspect("equal")
    return _save(fig, path)


def plot_spectra(df, path):
    terms = sorted(df["term"].unique())
    fig, axes = plt.subplots(1, len(terms), figsize=(3.6 * len(terms), 3.4), squeeze=False)
    for ax, t in zip(axes[0], terms):
        sub = df[df["term"] == t]
        for _, g in sub.groupby("sample"):
            ax.plot(g["freq"], g["value"], "-", lw=0.8, alpha=0.7)
        ax.set_xscale("log")
        ax.set_xlabel("frequency (Hz)")
        ax.set_title(t, fontsize=10)
    return _save(fig, path)


def plot_crossval(report, path):
    fig, ax = plt.subplots(figsize=(6, 3.6))
    folds = [f.fold for f in report.folds]
    w = 0.38
    ax.bar(np.array(folds) - w / 2, [f.rmse_ergodic for f in report.folds], w, label="ergodic")
    ax.bar(np.array(folds) + w / 2, [f.rmse_nonergodic for f in report.folds], w, label="non-ergodic")
    ax.set_xlabel("fold")
    ax.set_ylabel("rmse")
    ax.legend(fontsize=8)
    return _save(fig, path)

"""Figures written next to the CSV reports. Uses the non-interactive Agg backend."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_latent_map(table, path) -> Path:
    """Latent means coloured by true TCP position (hue ~ x, value ~ y); goal as a star."""
    walk = table.walk_rows
    tcp = np.array([r.tcp_true for r in walk])
    lat = np.array([r.latent_mean for r in walk])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 4))
        span = np.ptp(tcp, axis=0)
        span[span == 0] = 1.0
        norm = (tcp - tcp.min(0)) / span
        hsv = np.stack([0.33 * norm[:, 0], 0.25 + 0.75 * norm[:, 1], np.full(len(norm), 0.9)], 1)
        ax.scatter(lat[:, 0], lat[:, 1], c=matplotlib.colors.hsv_to_rgb(hsv), s=14)
        for r in table.goal_rows:
            ax.scatter(*r.latent_mean, marker="*", s=160, c="tab:blue", edgecolors="k", zorder=3)
        ax.set_xlabel("latent 1")
        ax.set_ylabel("latent 2")
        ax.set_aspect("equal", adjustable="datalim")
        return _save(fig, path)


def plot_success_curve(rates: Sequence[float], path, label: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        stages = np.arange(1, len(rates) + 1)
        ax.plot(stages, rates, "o-", label=label or None)
        ax.set_xticks(stages)
        ax.set_ylim(-0.05, 1.05)
        ax.set_xlabel("objects packed")
        ax.set_ylabel("success rate")
        if label:
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_training(report, path) -> Path:
    recs = report.records
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ep = [r.epoch for r in recs]
        for key in ("loss_x", "loss_z", "total"):
            ax.plot(ep, [getattr(r, key) for r in recs], label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_errors(stats, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.hist(np.asarray(stats.errors) * 1e3, bins=20)
        ax.set_xlabel("final TCP error [mm]")
        ax.set_ylabel("trials")
        return _save(fig, path)

"""Matplotlib renderings for the CLI report path.

Figures are written next to the delimited outputs they visualize. The
Agg backend keeps things headless, and PNG metadata is pinned so a
rerun reproduces identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from latentshield.analytics import Trajectory

__all__ = ["plot_trajectory", "plot_shift_summary", "plot_report_bars"]

_PNG_META = {"Software": None}  # drop the version string for byte-stable output


def _save(fig, path):
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def plot_trajectory(traj: Trajectory, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6.0, 3.8))
    if traj.points:
        its = traj.column("iteration")
        for name, color in (("loss", "tab:blue"), ("mu_shift", "tab:red"),
                            ("sigma_shift", "tab:green"), ("logvar_gap", "tab:purple"),
                            ("delta_linf", "tab:gray")):
            vals = np.maximum(np.abs(traj.column(name)), 1e-30)
            ax.semilogy(its, vals, label=f"|{name}|", color=color, lw=1.2)
        ax.legend(fontsize=8, ncol=2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("magnitude (log)")
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    _save(fig, path)


def plot_shift_summary(names: list[str], mu_shifts: list[float],
                       sigma_shifts: list[float], path) -> None:
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(names) + 2), 3.6))
    idx = np.arange(len(names))
    ax.bar(idx - 0.2, np.maximum(mu_shifts, 1e-30), width=0.4, label="mu_shift")
    ax.bar(idx + 0.2, np.maximum(sigma_shifts, 1e-30), width=0.4, label="sigma_shift")
    ax.set_yscale("log")
    ax.set_xticks(idx)
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("squared latent shift")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_report_bars(report, path) -> None:
    """Grouped mean held-out loss per (defense, condition)."""
    groups = report.summary()["groups"]
    labels = list(groups)
    finals = [groups[g]["final_loss_mean"] for g in labels]
    cleans = [groups[g]["clean_final_loss_mean"] for g in labels]
    idx = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(5.0, 0.5 * len(labels) + 2), 4.0))
    ax.bar(idx - 0.2, finals, width=0.4, label="trained on condition data")
    ax.bar(idx + 0.2, cleans, width=0.4, label="clean baseline")
    ax.set_xticks(idx)
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("held-out denoise loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)

"""Figure rendering for run reports.

Every report directory gets PNG figures next to its trajectory.csv and
metrics.json. All writes go through a temp file and atomic rename.
"""

from __future__ import annotations

import os

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = [
    "save_trajectory_figure",
    "save_dual_error_figure",
    "save_rates_figure",
    "save_bvp_figure",
    "save_lambda_curve_figure",
    "save_perturbation_figure",
    "save_classwise_figure",
]


def _atomic_save(fig, path):
    tmp = str(path) + ".tmp.png"
    fig.savefig(tmp, dpi=150, bbox_inches="tight")
    plt.close(fig)
    os.replace(tmp, path)


def save_trajectory_figure(traj, path):
    """Lagrangian/average and dual trajectories, two stacked panels."""
    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    steps = np.asarray(traj.steps)
    ax0.plot(steps, traj.lagrangian, lw=0.8, label="Lagrangian")
    ax0.plot(steps, traj.avg_lagrangian, lw=1.4, label="running average")
    ax0.set_ylabel("empirical Lagrangian")
    ax0.legend(loc="best", fontsize=8)
    lam = np.asarray(traj.lam)
    mu = np.asarray(traj.mu)
    for j, label in enumerate(traj.ineq_labels):
        ax1.plot(steps, lam[:, j], lw=0.9, label=f"lambda[{label}]")
    for j, label in enumerate(traj.eq_labels):
        ax1.plot(steps, mu[:, j], lw=0.9, label=f"mu[{label}]")
    ax1.set_xlabel("step")
    ax1.set_ylabel("dual variables")
    if traj.ineq_labels or traj.eq_labels:
        ax1.legend(loc="best", fontsize=7, ncol=2)
    _atomic_save(fig, path)


def save_dual_error_figure(traj, mu_star, path):
    """Distance of the equality duals to the closed-form optimum, log scale."""
    mu = np.asarray(traj.mu)
    err = np.max(np.abs(mu - np.asarray(mu_star)[None, :]), axis=1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(traj.steps, np.maximum(err, 1e-17), lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel(r"$\|\mu - \mu^*\|_\infty$")
    _atomic_save(fig, path)


def save_rates_figure(rates_by_run, path, target=None):
    """Grouped bars of hard positive rates per group for several runs."""
    runs = list(rates_by_run)
    n_groups = len(next(iter(rates_by_run.values())))
    width = 0.8 / len(runs)
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(n_groups)
    for i, run in enumerate(runs):
        ax.bar(xs + i * width, rates_by_run[run], width, label=run)
    if target is not None:
        ax.axhline(target, color="k", ls="--", lw=0.8)
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels([f"group {g}" for g in range(n_groups)])
    ax.set_ylabel("positive rate")
    ax.legend(fontsize=8)
    _atomic_save(fig, path)


def save_bvp_figure(grid, pred, truth, nx, nt, path):
    """Prediction, ground truth, and absolute error heatmaps."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    fields = [(pred, "prediction"), (truth, "truth"), (np.abs(pred - truth), "|error|")]
    for ax, (field, title) in zip(axes, fields):
        im = ax.imshow(
            np.asarray(field).reshape(nx, nt).T,
            origin="lower",
            aspect="auto",
            extent=[0, 2 * np.pi, 0, 1],
            cmap="RdBu_r" if title != "|error|" else "magma",
        )
        ax.set_title(title, fontsize=9)
        ax.set_xlabel("x")
        ax.set_ylabel("t")
        fig.colorbar(im, ax=ax, shrink=0.85)
    _atomic_save(fig, path)


def save_lambda_curve_figure(eps_values, lam_values, path):
    """Inequality dual versus relaxation level, log-log."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.loglog(eps_values, lam_values, "o-", lw=1.0)
    ax.set_xlabel("eps")
    ax.set_ylabel(r"$\lambda^*$")
    ax.invert_xaxis()
    _atomic_save(fig, path)


def save_perturbation_figure(reports, path):
    """Dual-value gap against its sandwich bounds for a batch of instances."""
    gaps = np.array([r["gap"] for r in reports])
    lows = np.array([r["lower"] for r in reports])
    ups = np.array([r["upper"] for r in reports])
    order = np.argsort(gaps)
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(len(reports))
    ax.fill_between(xs, lows[order], ups[order], alpha=0.3, label="bounds")
    ax.plot(xs, gaps[order], "k.", ms=4, label="gap")
    ax.set_xlabel("instance (sorted)")
    ax.set_ylabel("dual-value drop")
    ax.legend(fontsize=8)
    _atomic_save(fig, path)


def save_classwise_figure(noise_levels, dual_values, path):
    """Final class duals against injected noise, one marker per seed."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    duals = np.atleast_2d(np.asarray(dual_values))
    for row in duals:
        ax.plot(noise_levels, row, "o", alpha=0.6)
    ax.set_xlabel("injected label noise")
    ax.set_ylabel("final dual value")
    _atomic_save(fig, path)

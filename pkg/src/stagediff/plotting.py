"""Report figures: schedule curves and training loss, rendered to files."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .schedules import NoiseSchedule, eval_alpha_sigma


def schedule_figure(ns: NoiseSchedule, path: Path, points_per_stage: int = 200):
    """Signal/noise coefficients over time with stage boundaries marked."""
    ss = ns.stage_sched
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2), constrained_layout=True)
    for k in range(ss.K + 1):
        lo, hi = ss.tau[k], ss.tau[k + 1]
        t = [lo + (hi - lo) * j / points_per_stage for j in range(points_per_stage + 1)]
        pairs = [eval_alpha_sigma(ns, v, k) for v in t]
        ax1.plot(t, [p[0] for p in pairs], color="C0", lw=1.5)
        ax1.plot(t, [p[1] for p in pairs], color="C1", lw=1.5)
        snr = [p[0] ** 2 / p[1] ** 2 for p in pairs if p[1] > 0]
        ax2.semilogy(t[-len(snr):], snr, color="C2", lw=1.5)
    for tau in ss.tau[1:-1]:
        for ax in (ax1, ax2):
            ax.axvline(tau, color="gray", lw=0.7, ls="--")
    ax1.plot([], [], color="C0", label="alpha")
    ax1.plot([], [], color="C1", label="sigma")
    ax1.set_xlabel("t")
    ax1.legend(frameon=False)
    ax1.set_title(f"noise schedule ({ns.mode.value}, {ss.K + 1} stages)")
    ax2.set_xlabel("t")
    ax2.set_title("SNR")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=130)
    plt.close(fig)


def loss_figure(log_path: Path, path: Path, window: int = 100):
    """Per-step loss and its moving average from the training CSV."""
    steps, losses = [], []
    with open(log_path, newline="") as fh:
        for row in csv.DictReader(fh):
            loss = float(row["loss"])
            steps.append(int(row["step"]))
            losses.append(loss)
    fig, ax = plt.subplots(figsize=(6, 3.2), constrained_layout=True)
    ax.semilogy(steps, losses, lw=0.5, alpha=0.45, label="loss")
    if len(losses) >= window:
        avg = [
            sum(losses[i - window : i]) / window for i in range(window, len(losses) + 1)
        ]
        ax.semilogy(steps[window - 1 :], avg, lw=1.5, label=f"{window}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=130)
    plt.close(fig)

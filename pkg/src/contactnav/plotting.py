"""Report and training figures, rendered to byte-stable SVG files.

matplotlib SVG output embeds randomized element ids and a creation date by
default; both are pinned here (fixed hashsalt, no date metadata) so a fixed
input always produces the identical file.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ConfigurationError
from .evaluation import BUCKETS, EvalReport

_SVG_METADATA = {"Date": None}


def _new_figure(w=6.0, h=4.0):
    plt.rcParams["svg.hashsalt"] = "contactnav"
    return plt.subplots(figsize=(w, h))


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata=_SVG_METADATA)
    plt.close(fig)


def plot_success(report: EvalReport, path: str | Path) -> Path:
    """Bar chart of bucket success rates (one bar per density bucket)."""
    fig, ax = _new_figure()
    rates = [report.buckets[k].success_rate for k in BUCKETS]
    ax.bar(range(len(BUCKETS)), rates, color="#4878d0")
    ax.set_xticks(range(len(BUCKETS)), [f"density {k}" for k in BUCKETS])
    ax.set_ylabel("success rate [%]")
    ax.set_ylim(0, 100)
    ax.set_title("Success rate by crowd density bucket")
    for i, r in enumerate(rates):
        ax.text(i, r + 1.5, f"{r:.1f}%", ha="center", fontsize=9)
    path = Path(path)
    _save(fig, path)
    return path


def plot_completion_time(report: EvalReport, path: str | Path) -> Path:
    """Mean completion time per bucket with the spread as error bars."""
    fig, ax = _new_figure()
    xs, means, stds, labels = [], [], [], []
    for i, k in enumerate(BUCKETS):
        b = report.buckets[k]
        if b.time_mean is None:
            continue
        xs.append(i)
        means.append(b.time_mean)
        stds.append(b.time_std or 0.0)
        labels.append(f"density {k}")
    if not xs:
        raise ConfigurationError("no reached episodes; nothing to plot")
    ax.errorbar(xs, means, yerr=stds, fmt="o-", capsize=4, color="#d65f5f")
    ax.set_xticks(xs, labels)
    ax.set_ylabel("time to completion [s]")
    ax.set_title("Completion time by crowd density bucket")
    path = Path(path)
    _save(fig, path)
    return path


def plot_training_curves(metrics_csv: str | Path, path: str | Path) -> Path:
    """Loss, success-rate, and force-ratio curves over environment steps."""
    rows = list(csv.DictReader(open(metrics_csv)))
    if not rows:
        raise ConfigurationError(f"metrics file {metrics_csv} has no data rows")
    steps = [int(r["env_steps"]) for r in rows]
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    plt.rcParams["svg.hashsalt"] = "contactnav"
    panels = [
        ("total_loss", "total loss"),
        ("success_rate", "episode success rate"),
        ("mean_force_ratio", "mean force ratio"),
        ("entropy", "policy entropy"),
    ]
    for ax, (col, label) in zip(axes.ravel(), panels):
        ax.plot(steps, [float(r[col]) for r in rows], lw=1.2)
        ax.set_xlabel("environment steps")
        ax.set_title(label)
    fig.tight_layout()
    path = Path(path)
    _save(fig, path)
    return path


def plot_replay_strip(log, world, path: str | Path, frames: int = 6) -> Path:
    """Frame-by-frame top-down strip of a logged episode."""
    steps = log.steps
    if not steps:
        raise ConfigurationError("episode log has no steps to render")
    picks = [steps[int(round(i * (len(steps) - 1) / max(frames - 1, 1)))]
             for i in range(min(frames, len(steps)))]
    fig, axes = plt.subplots(1, len(picks), figsize=(3 * len(picks), 3))
    plt.rcParams["svg.hashsalt"] = "contactnav"
    if len(picks) == 1:
        axes = [axes]
    for ax, rec in zip(axes, picks):
        for x1, y1, x2, y2 in world.walls:
            ax.plot([x1, x2], [y1, y2], color="black", lw=1.5)
        trail_x = [r["x"] for r in steps if r["step"] <= rec["step"]]
        trail_y = [r["y"] for r in steps if r["step"] <= rec["step"]]
        ax.plot(trail_x, trail_y, color="#4878d0", lw=1.0, alpha=0.7)
        ax.add_patch(plt.Circle((rec["x"], rec["y"]), 0.3, color="#4878d0", alpha=0.9))
        ax.plot(*world.goal_xy, marker="*", color="green", ms=12)
        ax.set_aspect("equal")
        ax.set_title(f"t = {rec['t']:.1f} s", fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    path = Path(path)
    _save(fig, path)
    return path

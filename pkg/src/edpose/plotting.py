"""Derived figures: loss curves, ablation comparisons and prediction overlays."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(y) < window:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def plot_loss_curve(records: Sequence[dict], path: str | Path, title: str = "training loss") -> Path:
    steps = np.array([r["step"] for r in records])
    total = np.array([r["total"] for r in records])
    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=110)
    ax.plot(steps, total, color="0.75", lw=0.8, label="per step")
    w = max(1, len(total) // 50)
    if w > 1:
        ax.plot(steps[w - 1:], _smooth(total, w), color="C0", lw=1.5, label=f"mean of {w}")
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_ablation(curves: Mapping[str, Sequence[float]], path: str | Path,
                  final_ap: Mapping[str, float] | None = None) -> Path:
    """Loss trajectories of every variant, plus a bar chart of final AP when given."""
    ncols = 2 if final_ap else 1
    fig, axes = plt.subplots(1, ncols, figsize=(6 * ncols, 4), dpi=110, squeeze=False)
    ax = axes[0, 0]
    for name, losses in curves.items():
        y = np.asarray(losses, dtype=float)
        w = max(1, len(y) // 20)
        ax.plot(np.arange(len(y) - (w - 1 if w > 1 else 0)) + 1, _smooth(y, w), lw=1.2, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7, frameon=False)
    if final_ap:
        bx = axes[0, 1]
        names = list(final_ap)
        bx.barh(np.arange(len(names)), [final_ap[n] for n in names], color="C1")
        bx.set_yticks(np.arange(len(names)), names, fontsize=7)
        bx.set_xlabel("train-split AP")
        bx.invert_yaxis()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def _rect(ax, box, **kw):
    cx, cy, w, h = box
    ax.add_patch(Rectangle((cx - w / 2, cy - h / 2), w, h, fill=False, **kw))


def render_overlay(image: np.ndarray, instances: Sequence[dict], path: str | Path,
                   limbs: Sequence[tuple[int, int]] = ()) -> Path:
    """Draw human boxes, keypoint boxes and skeletons (pixel coordinates) over ``image``."""
    H, W = image.shape[:2]
    fig = plt.figure(figsize=(W / 100, H / 100), dpi=100)
    ax = fig.add_axes([0, 0, 1, 1])
    ax.imshow(image)
    ax.set_xlim(0, W)
    ax.set_ylim(H, 0)
    ax.axis("off")
    for i, inst in enumerate(instances):
        color = plt.cm.tab10(i % 10)
        _rect(ax, inst["box"], edgecolor=color, lw=1.5)
        kp = np.asarray(inst["keypoints"])
        for kb in inst["keypoint_boxes"]:
            _rect(ax, kb, edgecolor=color, lw=0.5, alpha=0.7)
        for a, b in limbs:
            ax.plot(kp[[a, b], 0], kp[[a, b], 1], color=color, lw=1.0)
        ax.scatter(kp[:, 0], kp[:, 1], s=6, color=color, zorder=3)
        ax.text(inst["box"][0] - inst["box"][2] / 2, inst["box"][1] - inst["box"][3] / 2,
                f"{inst['score']:.2f}", color="white", fontsize=6,
                bbox={"facecolor": color, "pad": 1, "lw": 0})
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path

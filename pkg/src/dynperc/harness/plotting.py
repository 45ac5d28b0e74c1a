"""Figures and raster renderings written next to the JSON/CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from ..heads import LOSS_NAMES, MAX_DEPTH  # noqa: E402
from ..metrics import PanopticMap  # noqa: E402
from .scene import CLASS_COLORS, ROAD, SKY  # noqa: E402

STUFF_COLORS = {SKY: (0.45, 0.65, 0.95), ROAD: (0.4, 0.4, 0.4)}


def plot_loss_trace(trace: Sequence[Mapping[str, float]], path: str | Path) -> Path:
    steps = [row["step"] for row in trace]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [row["total"] for row in trace], color="black", lw=2, label="total")
    for name in LOSS_NAMES:
        values = np.array([row.get(name, np.nan) for row in trace], dtype=float)
        if np.isfinite(values).any():
            ax.plot(steps, values, lw=1, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_routing(routing: Mapping[str, Mapping[str, np.ndarray]], tasks: Sequence[str],
                 levels: Sequence[int], path: str | Path) -> Path | None:
    """Channel-mean routing score per level, one panel per branch and score kind."""
    if not routing:
        return None
    panels = [(b, kind) for b in routing for kind in ("primary", "secondary")]
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3), squeeze=False)
    for ax, (branch, kind) in zip(axes[0], panels):
        scores = routing[branch][kind]
        for t, task in enumerate(tasks):
            mean = scores[t].mean(axis=1)
            spread = scores[t].std(axis=1)
            ax.errorbar(list(levels), mean, yerr=spread, marker="o", capsize=3, label=task)
        ax.set_title(f"{branch} / {kind}", fontsize=9)
        ax.set_xlabel("level")
        ax.set_ylabel("routing score")
        ax.set_xticks(list(levels))
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_bench(row: Mapping[str, float], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(["dr1conv", "dense oracle"], [row["dr1conv_median_s"], row["oracle_median_s"]],
           color=["tab:blue", "tab:gray"])
    ax.set_yscale("log")
    ax.set_ylabel("median seconds")
    ax.set_title(f"C={row['channels']} {row['height']}x{row['width']} k={row['kernel']}: "
                 f"{row['speedup']:.1f}x", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def panoptic_rgb(m: PanopticMap) -> np.ndarray:
    """H x W x 3 uint8; thing instances get alternating shades of their class color."""
    out = np.zeros(m.class_map.shape + (3,))
    for c, color in {**STUFF_COLORS, **CLASS_COLORS}.items():
        out[m.class_map == c] = color
    shade = np.where(m.instance_map > 0, 0.7 + 0.3 * ((m.instance_map * 37) % 7) / 6, 1.0)
    return np.clip(out * shade[..., None] * 255, 0, 255).astype(np.uint8)


def save_panoptic_ppm(m: PanopticMap, path: str | Path) -> Path:
    Image.fromarray(panoptic_rgb(m)).save(path, format="PPM")
    return Path(path)


def save_depth_pgm(depth: np.ndarray, path: str | Path, max_depth: float = MAX_DEPTH) -> Path:
    """16-bit PGM, linear in meters over [0, max_depth]."""
    scaled = np.clip(np.asarray(depth) / max_depth, 0.0, 1.0) * 65535
    Image.fromarray(scaled.astype(np.uint16)).save(path, format="PPM")
    return Path(path)

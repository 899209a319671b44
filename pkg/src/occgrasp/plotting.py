"""Figures for evaluation matrices and training curves (written to files)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

SKILL_LABELS = ("pivot", "push", "grasp")


def plot_skill_frequency(matrix, path, obj: str = "nominal") -> None:
    """Mean per-episode skill counts against wall length for one object."""
    cells = sorted((l, c) for (o, l), c in matrix.cells.items() if o == obj)
    if not cells:
        raise ValueError(f"no cells for object {obj!r}")
    lengths = [l for l, _ in cells]
    counts = np.array([c.mean_counts() for _, c in cells])
    x = np.arange(len(lengths))
    width = 0.25
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for k, name in enumerate(SKILL_LABELS):
        ax.bar(x + (k - 1) * width, counts[:, k], width, label=name)
    ax.set_xticks(x, [f"{l:.1f}" for l in lengths])
    ax.set_xlabel("wall lateral length l [m]")
    ax.set_ylabel("mean selections per episode")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_success(matrix, path) -> None:
    rows = matrix.to_rows()
    labels = [f"{r['object']}\nl={r['wall_length']}" for r in rows]
    rates = [float(r["success_rate"]) for r in rows]
    fig, ax = plt.subplots(figsize=(max(5.0, 0.8 * len(rows)), 3.5))
    ax.bar(range(len(rows)), rates, color="tab:blue")
    ax.set_xticks(range(len(rows)), labels, fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("success rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_curve(rows, path, x: str, ys, ylabel: str = "") -> None:
    """Line plot of selected columns from a list of dict rows."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    xs = [float(r[x]) for r in rows]
    for y in ys:
        ax.plot(xs, [float(r[y]) for r in rows], label=y)
    ax.set_xlabel(x)
    ax.set_ylabel(ylabel)
    if len(ys) > 1:
        ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

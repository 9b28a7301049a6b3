"""Render figures from the TSV tables written by the CLI."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evalkit import read_table  # noqa: E402


def plot_learning_curve(rows, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    stages = sorted({int(r["stage"]) for r in rows})
    offset = 0
    for s in stages:
        part = [r for r in rows if int(r["stage"]) == s]
        xs = [offset + int(r["epoch"]) for r in part]
        ax.plot(xs, [r["total"] for r in part], label=f"stage {s}")
        offset = xs[-1] + 1
    ax.set_xlabel("epoch (cumulative)")
    ax.set_ylabel("training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_frontier(rows, path: Path, anchors=None) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    label = next(k for k in rows[0] if k not in ("method", "top1", "cost", "raw_utility", "utility", "n", "dominated"))
    pts = sorted(rows, key=lambda r: r["cost"])
    ax.plot([r["cost"] for r in pts], [r["top1"] for r in pts], "o-", label=f"sweep over {label}")
    for r in rows:
        if r.get("dominated"):
            ax.plot(r["cost"], r["top1"], "x", color="grey")
    for r in anchors or []:
        ax.plot(r["cost"], r["top1"], "s", label=str(r["method"]))
    ax.set_xlabel("average models executed")
    ax.set_ylabel("top-1 (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_stages(rows, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted({r["method"] for r in rows}):
        part = sorted((r for r in rows if r["method"] == method), key=lambda r: r["stages"])
        ax.plot([int(r["stages"]) for r in part], [r["utility"] for r in part], "o-", label=method)
    ax.set_xlabel("ensemble size")
    ax.set_ylabel("utility")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_histogram(rows, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar([str(r["size"]).replace(".0", "") for r in rows], [r["count"] for r in rows])
    ax.set_xlabel("smallest correct ensemble size")
    ax.set_ylabel("samples")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_folder(folder) -> list[Path]:
    """Draw every figure whose source table exists in ``folder``."""
    folder = Path(folder)
    made = []
    if (folder / "learning_curve.tsv").exists():
        made.append(plot_learning_curve(read_table(folder / "learning_curve.tsv"), folder / "learning_curve.png"))
    if (folder / "frontier.tsv").exists():
        anchors = read_table(folder / "anchors.tsv") if (folder / "anchors.tsv").exists() else None
        made.append(plot_frontier(read_table(folder / "frontier.tsv"), folder / "frontier.png", anchors))
    if (folder / "utility_vs_stages.tsv").exists():
        made.append(plot_stages(read_table(folder / "utility_vs_stages.tsv"), folder / "utility_vs_stages.png"))
    if (folder / "min_ensemble_size.tsv").exists():
        made.append(plot_histogram(read_table(folder / "min_ensemble_size.tsv"), folder / "min_ensemble_size.png"))
    return made

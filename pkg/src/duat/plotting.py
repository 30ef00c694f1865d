"""Figure rendering for reports. Uses the non-interactive Agg backend."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .losses import EvalReport  # noqa: E402

# fixed metadata keeps the PNG bytes identical across reruns
_PNG_META = {"Software": None}


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def size_curve(report: EvalReport, path: Union[str, Path], title: str = "Dice by object size") -> Path:
    """Mean dice per area-fraction bin, with sample counts as annotations."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    centers = [50.0 * (b["lo"] + b["hi"]) for b in report.bins]
    dice = [b["mean_dice"] for b in report.bins]
    ax.plot(centers, dice, marker="o")
    for x, y, b in zip(centers, dice, report.bins):
        ax.annotate(f"n={b['count']}", (x, y), textcoords="offset points", xytext=(0, 6),
                    ha="center", fontsize=7)
    ax.set_xlabel("object area (% of image)")
    ax.set_ylabel("mean dice")
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def training_curve(records: Sequence[Dict], path: Union[str, Path]) -> Path:
    """Step losses, plus validation mDice per epoch on a twin axis when logged."""
    steps = [r for r in records if r.get("record") == "step"]
    epochs = [r for r in records if r.get("record") == "epoch" and "val_mdice" in r]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r["step"] for r in steps], [r["loss"] for r in steps], lw=1, label="train loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if epochs and steps:
        per_epoch = max(1, steps[-1]["step"] // max(1, len(epochs)))
        twin = ax.twinx()
        twin.plot([(r["epoch"] + 1) * per_epoch for r in epochs], [r["val_mdice"] for r in epochs],
                  color="tab:orange", marker=".", label="val mDice")
        twin.set_ylabel("val mDice")
        twin.set_ylim(0, 1.05)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def ablation_bars(rows: Sequence[Dict], path: Union[str, Path]) -> Path:
    """Grouped bars of mDice and small-object dice per variant."""
    fig, ax = plt.subplots(figsize=(7, 3.8))
    names = [r["variant"] for r in rows]
    xs = range(len(rows))
    ax.bar([x - 0.2 for x in xs], [r["mdice"] for r in rows], width=0.4, label="mDice")
    ax.bar([x + 0.2 for x in xs], [r["small_dice"] if r["small_dice"] is not None else 0.0 for r in rows],
           width=0.4, label="dice (<5% area)")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names, rotation=25, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    return _save(fig, path)

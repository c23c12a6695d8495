"""Report rendering: delimited tables, text summaries, and figures."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .infer_eval import EvaluationReport
from .train import RunRecord


def write_dice_table(report: EvaluationReport, path) -> None:
    """Per-case, per-class Dice rows as CSV."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["case_id", "class_id", "class_name", "dice", "absent"])
        for r in report.rows:
            writer.writerow([r.case_id, r.class_id, r.class_name, f"{r.dice:.6f}", int(r.absent)])


def write_summary(report: EvaluationReport, path) -> str:
    """Class-wise mean/sd/N block; returns the text that was written."""
    lines = [f"{'class':<22}{'mean':>8}{'sd':>8}{'N':>6}"]
    for _cid, name, mean, sd, n in report.summary():
        lines.append(f"{name:<22}{mean:>8.4f}{sd:>8.4f}{n:>6d}")
    if report.unpaired:
        lines.append("")
        lines.append("unpaired cases: " + ", ".join(report.unpaired))
    text = "\n".join(lines) + "\n"
    with open(path, "w") as f:
        f.write(text)
    return text


def plot_dice_per_class(report: EvaluationReport, path) -> None:
    """Box plot of per-case Dice for each class."""
    class_ids = report.class_ids()
    data = [[r.dice for r in report.per_class(cid)] for cid in class_ids]
    names = [report.per_class(cid)[0].class_name for cid in class_ids]
    fig, ax = plt.subplots(figsize=(max(6, 1.1 * len(class_ids)), 4))
    ax.boxplot(data, tick_labels=names)
    ax.set_ylabel("Dice")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(axis="y", alpha=0.3)
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_run_log(record: RunRecord, path) -> None:
    """Per-epoch loss/lr table as CSV."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for e, (tl, vl, lr) in enumerate(zip(record.train_loss, record.val_loss, record.lr)):
            writer.writerow([e, f"{tl:.6f}", f"{vl:.6f}" if np.isfinite(vl) else "", f"{lr:.8f}"])


def plot_training_curves(record: RunRecord, path) -> None:
    epochs = np.arange(len(record.train_loss))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, record.train_loss, label="train")
    val = np.asarray(record.val_loss, dtype=float)
    if np.isfinite(val).any():
        ax1.plot(epochs, val, label="validation")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(epochs, record.lr)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("learning rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_evaluation(report: EvaluationReport, out_dir) -> dict[str, Path]:
    """Write table + summary + figure; returns the emitted paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "table": out_dir / "dice_per_case.csv",
        "summary": out_dir / "dice_summary.txt",
        "figure": out_dir / "dice_per_class.png",
    }
    write_dice_table(report, paths["table"])
    write_summary(report, paths["summary"])
    plot_dice_per_class(report, paths["figure"])
    return paths


def render_run(record: RunRecord, out_dir, run_name: str = "run") -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "log": out_dir / f"{run_name}_log.csv",
        "figure": out_dir / f"{run_name}_curves.png",
    }
    write_run_log(record, paths["log"])
    plot_training_curves(record, paths["figure"])
    return paths

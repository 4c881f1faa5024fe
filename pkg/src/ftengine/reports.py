"""Prediction and training-history reports: delimited files plus rendered
figures saved alongside them."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # headless: render straight to files
import matplotlib.pyplot as plt
import numpy as np


def _sibling(path, suffix):
    path = Path(path)
    return path.with_name(f"{path.stem}_{suffix}.png")


def write_records_csv(records, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "predicted_class", "confidence", "correct"])
        for r in records:
            correct = "" if r.correct is None else str(bool(r.correct)).lower()
            writer.writerow([r.item_id, r.predicted_class, f"{r.confidence:.6f}", correct])


def write_evaluation_json(result, class_names, path):
    payload = {
        "accuracy": result["accuracy"],
        "mean_loss": result["mean_loss"],
        "class_names": list(class_names),
        "confusion": np.asarray(result["confusion"]).tolist(),
        "records": [r.to_dict() for r in result["records"]],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def write_evaluation_report(result, class_names, out_path, figures=True):
    """One call for the CLI's report path: delimited output plus figures.

    .csv extension selects CSV (confusion and summary go to the figures and
    exit status); anything else gets the full JSON document. Returns the
    list of files written.
    """
    out_path = Path(out_path)
    written = [out_path]
    if out_path.suffix.lower() == ".csv":
        write_records_csv(result["records"], out_path)
    else:
        write_evaluation_json(result, class_names, out_path)
    if figures:
        conf_path = _sibling(out_path, "confusion")
        render_confusion_figure(result["confusion"], class_names, conf_path)
        hist_path = _sibling(out_path, "confidence")
        render_confidence_figure(result["records"], hist_path)
        written += [conf_path, hist_path]
    return written


def write_history_csv(reports, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy",
             "checkpoint_written", "wall_time"]
        )
        for r in reports:
            writer.writerow(
                [r.epoch, f"{r.train_loss:.6f}", f"{r.train_accuracy:.6f}",
                 f"{r.val_loss:.6f}", f"{r.val_accuracy:.6f}",
                 str(bool(r.checkpoint_written)).lower(), f"{r.wall_time:.3f}"]
            )


def write_history_report(reports, out_path, figures=True):
    """Epoch history as CSV plus a rendered loss/accuracy curve figure."""
    out_path = Path(out_path)
    write_history_csv(reports, out_path)
    written = [out_path]
    if figures:
        fig_path = _sibling(out_path, "curves")
        render_history_figure(reports, fig_path)
        written.append(fig_path)
    return written


def render_confusion_figure(confusion, class_names, path):
    conf = np.asarray(confusion)
    n = conf.shape[0]
    fig, ax = plt.subplots(figsize=(max(3.2, 0.7 * n + 2), max(2.8, 0.7 * n + 1.6)))
    im = ax.imshow(conf, cmap="Blues")
    ax.set_xticks(range(n), labels=class_names, rotation=45, ha="right")
    ax.set_yticks(range(n), labels=class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    threshold = conf.max() / 2 if conf.max() else 0.5
    for i in range(n):
        for j in range(n):
            ax.text(j, i, str(conf[i, j]), ha="center", va="center",
                    color="white" if conf[i, j] > threshold else "black")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_confidence_figure(records, path):
    confidences = [r.confidence for r in records]
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    ax.hist(confidences, bins=20, range=(0, 1), color="#4878a8", edgecolor="white")
    ax.set_xlabel("prediction confidence")
    ax.set_ylabel("count")
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_history_figure(reports, path):
    epochs = [r.epoch for r in reports]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.2))
    ax1.plot(epochs, [r.train_loss for r in reports], label="train", color="#4878a8")
    ax1.plot(epochs, [r.val_loss for r in reports], label="val", color="#d1605e")
    marked = [r.epoch for r in reports if r.checkpoint_written]
    if marked:
        ax1.plot(marked, [r.val_loss for r in reports if r.checkpoint_written],
                 "v", color="#d1605e", markersize=4, label="checkpoint")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(frameon=False, fontsize=8)
    ax2.plot(epochs, [r.train_accuracy for r in reports], label="train", color="#4878a8")
    ax2.plot(epochs, [r.val_accuracy for r in reports], label="val", color="#d1605e")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(0, 1.02)
    ax2.legend(frameon=False, fontsize=8)
    for ax in (ax1, ax2):
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

"""File outputs for runs: delimited tables, JSON summaries, matplotlib figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .data import CrowdClass, ImageRecord
from .evaluation import EvalReport
from .pipeline import CountResult

_CLASS_NAMES = [c.name for c in CrowdClass]


def _figure(w=7.0, h=4.5):
    return plt.subplots(figsize=(w, h), dpi=150)


def write_train_outputs(report, out_dir) -> dict[str, Path]:
    """epochs.csv, summary.json and the loss/validation curves figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    epochs_csv = out_dir / "epochs.csv"
    with open(epochs_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "lr", "loss_total", "loss_regression", "loss_classification",
             "loss_attention", "val_mae", "val_rmse"]
        )
        for row in report.epochs:
            writer.writerow(
                [row.epoch, f"{row.lr:.8f}", f"{row.loss_total:.6f}",
                 f"{row.loss_regression:.6f}", f"{row.loss_classification:.6f}",
                 f"{row.loss_attention:.6f}",
                 "" if row.val_mae is None else f"{row.val_mae:.6f}",
                 "" if row.val_rmse is None else f"{row.val_rmse:.6f}"]
            )
    paths["epochs"] = epochs_csv

    summary = out_dir / "summary.json"
    summary.write_text(
        json.dumps(
            {
                "train_mae": report.train_mae,
                "train_rmse": report.train_rmse,
                "cc_max": report.cc_max,
                "n_train_images": report.n_train_images,
                "n_val_images": report.n_val_images,
                "n_patches": report.n_patches,
                "epochs": len(report.epochs),
                "checkpoint": str(report.checkpoint) if report.checkpoint else None,
            },
            indent=2,
        )
    )
    paths["summary"] = summary

    fig, axes = plt.subplots(1, 2, figsize=(11, 4.2), dpi=150)
    xs = [r.epoch for r in report.epochs]
    axes[0].plot(xs, [r.loss_total for r in report.epochs], label="total", lw=1.8)
    axes[0].plot(xs, [r.loss_regression for r in report.epochs], label="regression", lw=1.2)
    axes[0].plot(xs, [r.loss_classification for r in report.epochs], label="classification", lw=1.2)
    axes[0].plot(xs, [r.loss_attention for r in report.epochs], label="attention", lw=1.2)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("training loss")
    axes[0].set_yscale("log")
    axes[0].legend(fontsize=8)
    axes[0].grid(alpha=0.3)
    val = [(r.epoch, r.val_mae) for r in report.epochs if r.val_mae is not None]
    ax2 = axes[1]
    if val:
        ax2.plot([v[0] for v in val], [v[1] for v in val], color="tab:red", lw=1.6, label="val MAE")
        ax2.set_ylabel("validation MAE")
        ax2.legend(loc="upper right", fontsize=8)
    ax2b = ax2.twinx()
    ax2b.plot(xs, [r.lr for r in report.epochs], color="tab:gray", lw=1.0, ls="--", label="lr")
    ax2b.set_ylabel("learning rate")
    ax2.set_xlabel("epoch")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    curves = out_dir / "curves.png"
    fig.savefig(curves)
    plt.close(fig)
    paths["curves"] = curves
    return paths


def write_eval_outputs(report: EvalReport, out_dir) -> dict[str, Path]:
    """per_image.csv, metrics.json, scatter + classifier figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    per_image = out_dir / "per_image.csv"
    with open(per_image, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "gt_count", "pred_count", "abs_err"])
        for r in report.rows:
            writer.writerow([r.image_id, r.gt, f"{r.pred:.4f}", f"{r.abs_err:.4f}"])
    paths["per_image"] = per_image

    metrics = {
        "mae": report.mae,
        "rmse": report.rmse,
        "n_images": report.n_images,
        "routing": report.routing,
    }
    if report.classifier is not None:
        metrics["classifier"] = {
            "precision": report.classifier.precision.tolist(),
            "recall": report.classifier.recall.tolist(),
            "usage": report.classifier.usage.tolist(),
            "confusion": report.classifier.confusion.tolist(),
            "classes": _CLASS_NAMES,
            "n_patches": report.classifier.n,
        }
    metrics_json = out_dir / "metrics.json"
    metrics_json.write_text(json.dumps(metrics, indent=2))
    paths["metrics"] = metrics_json

    fig, ax = _figure(5.2, 5.0)
    gts = [r.gt for r in report.rows]
    preds = [r.pred for r in report.rows]
    hi = max(max(gts, default=1), max(preds, default=1), 1) * 1.05
    ax.plot([0, hi], [0, hi], color="gray", lw=1.0, ls="--")
    ax.scatter(gts, preds, s=18, alpha=0.7)
    ax.set_xlabel("ground-truth count")
    ax.set_ylabel("predicted count")
    ax.set_title(f"MAE {report.mae:.2f}   RMSE {report.rmse:.2f}")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    scatter = out_dir / "scatter.png"
    fig.savefig(scatter)
    plt.close(fig)
    paths["scatter"] = scatter

    if report.classifier is not None:
        rep = report.classifier
        fig, axes = plt.subplots(1, 2, figsize=(10, 4.0), dpi=150)
        x = np.arange(4)
        axes[0].bar(x - 0.2, rep.precision, width=0.4, label="precision")
        axes[0].bar(x + 0.2, rep.recall, width=0.4, label="recall")
        axes[0].set_xticks(x, _CLASS_NAMES)
        axes[0].set_ylim(0, 1.05)
        axes[0].legend(fontsize=8)
        axes[0].set_title("classifier quality per density class")
        axes[1].bar(x, rep.usage, color="tab:green")
        axes[1].set_xticks(x, _CLASS_NAMES)
        axes[1].set_title("patch share per predicted class")
        for ax in axes:
            ax.grid(alpha=0.3, axis="y")
        fig.tight_layout()
        classes = out_dir / "classes.png"
        fig.savefig(classes)
        plt.close(fig)
        paths["classes"] = classes
    return paths


def write_count_outputs(result: CountResult, record: ImageRecord, out_dir) -> dict[str, Path]:
    """Per-patch table, JSON total, saliency overlay at exact image size, and
    an annotated figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    table = out_dir / f"{result.image_id}_patches.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "routed_class", "predicted_class", "count"])
        for pc in result.patches:
            writer.writerow(
                [pc.origin[0], pc.origin[1], pc.label.name, pc.predicted_label.name,
                 f"{pc.count:.4f}"]
            )
    paths["patches"] = table

    summary = out_dir / f"{result.image_id}_summary.json"
    summary.write_text(
        json.dumps(
            {"image_id": result.image_id, "total": result.total,
             "n_patches": len(result.patches)},
            indent=2,
        )
    )
    paths["summary"] = summary

    if result.saliency is not None:
        overlay = _saliency_overlay(record.image, result.saliency)
        overlay_png = out_dir / f"{result.image_id}_saliency.png"
        Image.fromarray(overlay).save(overlay_png)
        paths["saliency"] = overlay_png

    fig, ax = _figure(6.4, 6.4 * record.image.shape[0] / max(record.image.shape[1], 1))
    ax.imshow(record.image)
    if result.saliency is not None:
        ax.imshow(result.saliency, cmap="inferno", alpha=0.35, vmin=0.0, vmax=1.0)
    for pc in result.patches:
        top, left = pc.origin
        ax.text(
            left + 6, top + 18, f"{pc.label.name}\n{pc.count:.1f}",
            color="white", fontsize=7,
            bbox=dict(facecolor="black", alpha=0.45, pad=1.5),
        )
    ax.set_title(f"{result.image_id}: predicted total {result.total:.1f}")
    ax.set_axis_off()
    fig.tight_layout()
    figure = out_dir / f"{result.image_id}_figure.png"
    fig.savefig(figure)
    plt.close(fig)
    paths["figure"] = figure
    return paths


def _saliency_overlay(image: np.ndarray, saliency: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Blend attended regions (saliency >= threshold) in red; same H x W as the input."""
    out = image.astype(np.float64).copy()
    mask = saliency >= threshold
    red = np.array([220.0, 40.0, 40.0])
    out[mask] = 0.55 * out[mask] + 0.45 * red
    return np.clip(out, 0, 255).astype(np.uint8)

"""Evaluation reports and the file/figure outputs they feed."""

import csv
import json

import numpy as np
import pytest
import torch
from PIL import Image

from patchcount import ArchConfig, CrowdNet, evaluate
from patchcount.data import ImageRecord, generate_synthetic
from patchcount.evaluation import infer_image
from patchcount.report import (
    _saliency_overlay,
    write_count_outputs,
    write_eval_outputs,
    write_train_outputs,
)
from patchcount.train import EpochStats, TrainReport


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(1)
    m = CrowdNet(ArchConfig.tiny())
    m.cc_max = 24
    return m


@pytest.fixture(scope="module")
def records():
    return generate_synthetic(4, size_range=(64, 90), count_range=(0, 12), seed=5)


def test_evaluate_rows_and_metrics(model, records):
    report = evaluate(model, records, routing="predicted")
    assert report.n_images == 4
    assert [r.image_id for r in report.rows] == [r.id for r in records]
    assert [r.gt for r in report.rows] == [r.gt_count for r in records]
    errs = np.array([r.abs_err for r in report.rows])
    assert report.mae == pytest.approx(errs.mean())
    assert report.rmse == pytest.approx(np.sqrt((errs**2).mean()))
    assert report.classifier is not None  # model carries cc_max
    assert report.classifier.n == sum(
        -(-r.image.shape[0] // 64) * -(-r.image.shape[1] // 64) for r in records
    )


def test_evaluate_without_cc_max_skips_classifier(records):
    torch.manual_seed(2)
    bare = CrowdNet(ArchConfig.tiny())
    report = evaluate(bare, records, routing="predicted")
    assert report.classifier is None


def test_evaluate_gt_routing_uses_true_labels(model, records):
    report = evaluate(model, records, routing="gt")
    assert report.routing == "gt"
    # with ground-truth routing the "prediction" diagnostics still come from
    # the classifier head, so the confusion matrix need not be diagonal
    assert report.classifier.confusion.sum() == report.classifier.n


def test_infer_image_returns_saliency(model, records):
    res = infer_image(model, records[0])
    assert res.saliency is not None
    assert res.saliency.shape == records[0].image.shape[:2]


# ---------------------------------------------------------------- file outputs


def _train_report():
    rows = [
        EpochStats(
            epoch=e,
            lr=1e-3 * 0.5 ** (e // 2),
            loss_total=5.0 / (e + 1),
            loss_regression=4.0 / (e + 1),
            loss_classification=0.8 / (e + 1),
            loss_attention=0.2 / (e + 1),
            val_mae=3.0 / (e + 1) if e % 2 == 0 else None,
            val_rmse=4.0 / (e + 1) if e % 2 == 0 else None,
        )
        for e in range(4)
    ]
    return TrainReport(
        epochs=rows,
        train_mae=1.25,
        train_rmse=2.5,
        cc_max=31,
        n_train_images=9,
        n_val_images=1,
        n_patches=36,
        checkpoint=None,
    )


def test_write_train_outputs(tmp_path):
    paths = write_train_outputs(_train_report(), tmp_path)
    assert set(paths) == {"epochs", "summary", "curves"}
    with open(paths["epochs"]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert rows[0]["epoch"] == "0"
    assert float(rows[0]["loss_total"]) == pytest.approx(5.0)
    assert rows[1]["val_mae"] == ""  # no validation that epoch
    summary = json.loads(paths["summary"].read_text())
    assert summary["cc_max"] == 31
    assert summary["train_mae"] == 1.25
    assert paths["curves"].stat().st_size > 1000  # a real PNG, not a stub
    assert paths["curves"].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_write_eval_outputs(tmp_path, model, records):
    report = evaluate(model, records, routing="predicted")
    paths = write_eval_outputs(report, tmp_path)
    assert {"per_image", "metrics", "scatter", "classes"} == set(paths)
    with open(paths["per_image"]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert {r["image_id"] for r in rows} == {r.id for r in records}
    metrics = json.loads(paths["metrics"].read_text())
    assert metrics["mae"] == pytest.approx(report.mae)
    assert metrics["classifier"]["classes"] == ["NCP", "LCP", "MCP", "HCP"]
    conf = np.array(metrics["classifier"]["confusion"])
    assert conf.shape == (4, 4) and conf.sum() == report.classifier.n
    for key in ("scatter", "classes"):
        assert paths[key].stat().st_size > 1000


def test_write_eval_outputs_no_classifier(tmp_path, records):
    torch.manual_seed(3)
    bare = CrowdNet(ArchConfig.tiny())
    report = evaluate(bare, records, routing="predicted")
    paths = write_eval_outputs(report, tmp_path)
    assert "classes" not in paths
    assert "classifier" not in json.loads(paths["metrics"].read_text())


def test_write_count_outputs_overlay_dims(tmp_path, model, records):
    rec = records[1]
    res = infer_image(model, rec)
    paths = write_count_outputs(res, rec, tmp_path)
    assert {"patches", "summary", "saliency", "figure"} <= set(paths)
    with Image.open(paths["saliency"]) as im:
        assert im.size == (rec.image.shape[1], rec.image.shape[0])  # exact, not padded
    summary = json.loads(paths["summary"].read_text())
    assert summary["total"] == pytest.approx(res.total)
    assert summary["n_patches"] == len(res.patches)
    with open(paths["patches"]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(res.patches)
    assert all(r["routed_class"] in ("NCP", "LCP", "MCP", "HCP") for r in rows)


def test_saliency_overlay_blend():
    image = np.full((4, 6, 3), 100, dtype=np.uint8)
    sal = np.zeros((4, 6))
    sal[1, 2] = 0.9
    out = _saliency_overlay(image, sal)
    assert out.shape == image.shape
    assert out.dtype == np.uint8
    expected = (0.55 * 100 + 0.45 * np.array([220.0, 40.0, 40.0])).astype(np.uint8)
    assert np.array_equal(out[1, 2], expected)
    assert np.array_equal(out[0, 0], [100, 100, 100])  # untouched below threshold

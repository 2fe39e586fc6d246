"""Dataset evaluation: image-level MAE/RMSE plus classifier diagnostics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .data import ImageRecord, label_patch
from .losses import ClassifierReport, classifier_report, mae, rmse
from .network import CrowdNet
from .pipeline import CountResult, count_image


@dataclass
class EvalRow:
    image_id: str
    gt: int
    pred: float

    @property
    def abs_err(self) -> float:
        return abs(self.pred - self.gt)


@dataclass
class EvalReport:
    rows: list[EvalRow]
    mae: float
    rmse: float
    routing: str
    classifier: Optional[ClassifierReport] = None  # None when no cc_max is available

    @property
    def n_images(self) -> int:
        return len(self.rows)


def evaluate(
    model: CrowdNet,
    records: list[ImageRecord],
    *,
    routing: str = "predicted",
    cc_max: Optional[int] = None,
    chunk: int = 16,
) -> EvalReport:
    """Count every record and compare against its annotation.

    Patch-level classifier precision/recall/usage are reported when a cc_max
    is available (argument or stored on the model) to derive ground-truth
    patch labels.
    """
    cm = cc_max if cc_max is not None else model.cc_max
    rows = []
    gt_labels: list[int] = []
    pred_labels: list[int] = []
    for rec in records:
        result = count_image(rec, model, routing=routing, cc_max=cm, chunk=chunk)
        rows.append(EvalRow(image_id=rec.id, gt=rec.gt_count, pred=result.total))
        if cm is not None:
            for pc in result.patches:
                gt_labels.append(int(label_patch(pc.gt_count, cm)))
                pred_labels.append(int(pc.predicted_label))
    preds = [r.pred for r in rows]
    gts = [float(r.gt) for r in rows]
    report = classifier_report(gt_labels, pred_labels) if gt_labels else None
    return EvalReport(
        rows=rows, mae=mae(preds, gts), rmse=rmse(preds, gts), routing=routing, classifier=report
    )


def infer_image(model: CrowdNet, record: ImageRecord, *, collect_saliency: bool = True) -> CountResult:
    """Count a single (possibly unannotated) image, keeping the saliency map
    for visualisation when attention is enabled."""
    return count_image(record, model, routing="predicted", collect_saliency=collect_saliency)

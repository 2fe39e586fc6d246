"""Image-level counting: tile, classify, rescale, regress, aggregate.

Tiles are laid on a fixed grid from the top-left corner; right/bottom edge
tiles are zero-padded to full size. A point belongs to exactly one tile
(half-open membership), so tiling conserves the ground-truth count. Patch
counts are clamped at zero and summed with compensated summation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import torch

from .data import CrowdClass, DatasetStats, ImageRecord, Patch, label_patch
from .errors import ValidationError
from .interp import bilinear_resize
from .network import CrowdNet
from .rescale import rescale_patch


@dataclass
class PatchCount:
    origin: tuple[int, int]  # (row, col) of the tile in the source image
    label: CrowdClass  # class used to route the patch
    predicted_label: CrowdClass  # classifier output (equals label under predicted routing)
    count: float  # regressed patch count, >= 0
    gt_count: int


@dataclass
class CountResult:
    image_id: str
    patches: list[PatchCount]
    total: float
    saliency: Optional[np.ndarray] = field(default=None, repr=False)  # (H, W) float32


def tile_image(record: ImageRecord, tile: int = 256) -> list[Patch]:
    """Cut an image into a grid of tile x tile patches (edges zero-padded).

    Every annotation point lands in exactly one patch. An image smaller than
    one tile yields a single padded patch.
    """
    if tile < 1:
        raise ValidationError(f"tile size must be >= 1, got {tile}")
    h, w = record.image.shape[:2]
    pts = record.points
    patches = []
    for top in range(0, h, tile):
        for left in range(0, w, tile):
            block = record.image[top : top + tile, left : left + tile]
            if block.shape[0] == tile and block.shape[1] == tile:
                canvas = block
            else:
                canvas = np.zeros((tile, tile, 3), dtype=np.uint8)
                canvas[: block.shape[0], : block.shape[1]] = block
            local = _points_in_tile(pts, top, left, tile)
            patches.append(
                Patch(
                    pixels=canvas.transpose(2, 0, 1).astype(np.float32),
                    points=local,
                    origin=(top, left),
                    source_id=record.id,
                )
            )
    return patches


def _points_in_tile(pts: np.ndarray, top: int, left: int, tile: int) -> np.ndarray:
    if len(pts) == 0:
        return np.zeros((0, 2), dtype=np.float64)
    m = (
        (pts[:, 0] >= left)
        & (pts[:, 0] < left + tile)
        & (pts[:, 1] >= top)
        & (pts[:, 1] < top + tile)
    )
    return pts[m] - np.array([left, top], dtype=np.float64)


def tile_counts(record: ImageRecord, tile: int = 256) -> list[int]:
    """Per-tile ground-truth counts, same tile order as tile_image."""
    h, w = record.image.shape[:2]
    out = []
    for top in range(0, h, tile):
        for left in range(0, w, tile):
            out.append(len(_points_in_tile(record.points, top, left, tile)))
    return out


def compute_cc_max(records: Iterable[ImageRecord], tile: int = 256) -> DatasetStats:
    """Maximum per-tile count over the given (training) records, floored at 1."""
    best = 0
    for rec in records:
        counts = tile_counts(rec, tile)
        if counts:
            best = max(best, max(counts))
    return DatasetStats(cc_max=max(best, 1))


def aggregate_counts(counts: Iterable[float]) -> float:
    """Compensated sum of per-patch counts; rejects negative or non-finite input."""
    vals = [float(c) for c in counts]
    for v in vals:
        if not math.isfinite(v) or v < 0.0:
            raise ValidationError(f"patch counts must be finite and >= 0, got {v}")
    return math.fsum(vals)


def count_image(
    record: ImageRecord,
    model: CrowdNet,
    *,
    routing: str = "predicted",
    cc_max: Optional[int] = None,
    force_class: Optional[CrowdClass] = None,
    chunk: int = 16,
    collect_saliency: bool = False,
) -> CountResult:
    """Count one image end to end.

    routing="predicted" routes each patch by the classifier's argmax;
    routing="gt" routes by the ground-truth label (needs cc_max, taken from
    the model if not given). ``force_class`` overrides routing entirely.
    Inference only — runs under no_grad in eval mode; safe to call
    concurrently on a shared model.
    """
    if routing not in ("predicted", "gt"):
        raise ValidationError(f"routing must be 'predicted' or 'gt', got {routing!r}")
    tile = model.cfg.input_size
    patches = tile_image(record, tile)
    model.eval()

    results: list[PatchCount] = []
    h, w = record.image.shape[:2]
    canvas = None
    if collect_saliency and model.cfg.attention:
        rows = math.ceil(h / tile)
        cols = math.ceil(w / tile)
        canvas = np.zeros((rows * tile, cols * tile), dtype=np.float32)

    with torch.no_grad():
        for lo in range(0, len(patches), chunk):
            group = patches[lo : lo + chunk]
            batch = torch.from_numpy(np.stack([p.pixels for p in group]))
            prefix = model.forward_prefix(batch)
            pred = [CrowdClass(int(i)) for i in model.predict_labels(prefix.logits)]
            if force_class is not None:
                used = [CrowdClass(force_class)] * len(group)
            elif routing == "gt":
                cm = cc_max if cc_max is not None else model.cc_max
                if cm is None:
                    raise ValidationError("gt routing needs cc_max (none stored on the model)")
                used = [label_patch(p.gt_count, cm) for p in group]
            else:
                used = pred

            stack, owner = [], []
            for i, (p, lab) in enumerate(zip(group, used)):
                for arr in rescale_patch(p.pixels, lab).patches:
                    stack.append(arr.astype(np.float32))
                    owner.append(i)
            subs: dict[int, list[float]] = {i: [] for i in range(len(group))}
            if stack:
                cont = model.continue_from(
                    prefix,
                    torch.from_numpy(np.stack(stack)),
                    torch.tensor(owner, dtype=torch.long),
                )
                clamped = cont.counts.clamp_min(0.0).tolist()
                for o, c in zip(owner, clamped):
                    subs[o].append(c)

            for i, (p, lab) in enumerate(zip(group, used)):
                results.append(
                    PatchCount(
                        origin=p.origin,
                        label=lab,
                        predicted_label=pred[i],
                        count=math.fsum(subs[i]),
                        gt_count=p.gt_count,
                    )
                )

            if canvas is not None:
                sm1 = prefix.sms[1].cpu().numpy()  # (B, 1, s1, s1)
                for i, p in enumerate(group):
                    top, left = p.origin
                    up = bilinear_resize(sm1[i], (tile, tile))[0]
                    canvas[top : top + tile, left : left + tile] = up.astype(np.float32)

    total = aggregate_counts(pc.count for pc in results)
    saliency = canvas[:h, :w] if canvas is not None else None
    return CountResult(image_id=record.id, patches=results, total=total, saliency=saliency)

"""Dataset records, density-class labelling, ground-truth rasterisation, synthetic data.

Images are annotated with head points (x, y) in pixel coordinates; a record's
ground-truth count is simply the number of points. Manifests are JSON Lines:
one object per image with keys ``id``, ``image`` (path relative to the
manifest) and ``points`` (list of [x, y]).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import GenerationError, ManifestError, SamplingError, ValidationError
from .interp import bilinear_resize


class CrowdClass(IntEnum):
    """Density class of a patch, ordered by crowd level."""

    NCP = 0  # no crowd
    LCP = 1  # low crowd
    MCP = 2  # medium crowd
    HCP = 3  # high crowd


@dataclass
class ImageRecord:
    id: str
    image: np.ndarray  # (H, W, 3) uint8
    points: np.ndarray  # (n, 2) float64, columns (x, y)

    @property
    def gt_count(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class DatasetStats:
    """Statistics derived from the training split only."""

    cc_max: int  # maximum per-patch crowd count seen in training tiles, >= 1

    def __post_init__(self):
        if self.cc_max < 1:
            raise ValidationError(f"cc_max must be >= 1, got {self.cc_max}")


@dataclass
class Patch:
    """A fixed-size square patch cut from an image.

    ``points`` are patch-local (x, y) coordinates of the heads that fall
    inside the patch; ``origin`` is the (row, col) of the patch's top-left
    corner in the source image.
    """

    pixels: np.ndarray  # (3, S, S) float32, range 0..255
    points: np.ndarray  # (k, 2) float64
    origin: tuple[int, int] = (0, 0)
    source_id: str = ""

    @property
    def gt_count(self) -> int:
        return len(self.points)


def label_patch(cc_gt: int, cc_max: int) -> CrowdClass:
    """Assign the density class of a patch from its count and the dataset maximum.

    Thresholds are relative to cc_max: empty patches are NCP; counts up to
    5% of cc_max (inclusive) are LCP; counts up to 20% of cc_max (inclusive)
    are MCP; above that HCP. Comparisons use integer arithmetic
    (20*cc <= cc_max, 5*cc <= cc_max) so boundaries are exact.
    """
    cc_gt = int(cc_gt)
    cc_max = int(cc_max)
    if cc_max < 1:
        raise ValidationError(f"cc_max must be >= 1, got {cc_max}")
    if cc_gt < 0:
        raise ValidationError(f"patch count must be >= 0, got {cc_gt}")
    if cc_gt == 0:
        return CrowdClass.NCP
    if 20 * cc_gt <= cc_max:
        return CrowdClass.LCP
    if 5 * cc_gt <= cc_max:
        return CrowdClass.MCP
    return CrowdClass.HCP


def make_gt_segmap(
    points: np.ndarray,
    radius: float,
    out_resolution: tuple[int, int],
    patch_size: int = 256,
) -> np.ndarray:
    """Rasterise head points into a binary crowd-region map.

    A disk of the given radius is stamped around every point on the
    patch-size grid (pixel centres at integer coordinates, boundary
    inclusive), then the map is max-pooled to ``out_resolution``. Returns a
    uint8 array of 0/1 values.
    """
    out_h, out_w = int(out_resolution[0]), int(out_resolution[1])
    if patch_size % out_h or patch_size % out_w:
        raise ValidationError(
            f"output resolution {out_resolution} must divide patch size {patch_size}"
        )
    full = np.zeros((patch_size, patch_size), dtype=np.uint8)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    r2 = float(radius) * float(radius)
    for x, y in pts:
        x0 = max(int(math.ceil(x - radius)), 0)
        x1 = min(int(math.floor(x + radius)), patch_size - 1)
        y0 = max(int(math.ceil(y - radius)), 0)
        y1 = min(int(math.floor(y + radius)), patch_size - 1)
        if x0 > x1 or y0 > y1:
            continue
        ys = np.arange(y0, y1 + 1, dtype=np.float64)[:, None]
        xs = np.arange(x0, x1 + 1, dtype=np.float64)[None, :]
        inside = (xs - x) ** 2 + (ys - y) ** 2 <= r2
        full[y0 : y1 + 1, x0 : x1 + 1] |= inside.astype(np.uint8)
    fh = patch_size // out_h
    fw = patch_size // out_w
    return full.reshape(out_h, fh, out_w, fw).max(axis=(1, 3))


def hflip_patch(patch: Patch) -> Patch:
    """Mirror a patch horizontally; point x becomes (S - 1) - x."""
    size = patch.pixels.shape[2]
    pixels = np.ascontiguousarray(patch.pixels[:, :, ::-1])
    points = patch.points.copy()
    if len(points):
        points[:, 0] = (size - 1) - points[:, 0]
    return Patch(pixels=pixels, points=points, origin=patch.origin, source_id=patch.source_id)


def load_manifest(path) -> list[ImageRecord]:
    """Read a JSON Lines manifest and its referenced images."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records: list[ImageRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            for key in ("id", "image", "points"):
                if key not in obj:
                    raise ManifestError(f"{path}:{lineno}: missing key {key!r}")
            img_path = path.parent / obj["image"]
            if not img_path.is_file():
                raise ManifestError(f"{path}:{lineno}: image file missing: {img_path}")
            with Image.open(img_path) as im:
                image = np.asarray(im.convert("RGB"), dtype=np.uint8)
            points = np.asarray(obj["points"], dtype=np.float64).reshape(-1, 2)
            _check_points(points, image.shape, str(obj["id"]))
            records.append(ImageRecord(id=str(obj["id"]), image=image, points=points))
    if not records:
        raise ManifestError(f"{path}: manifest contains no records")
    return records


def _check_points(points: np.ndarray, image_shape, record_id: str) -> None:
    if len(points) == 0:
        return
    h, w = image_shape[:2]
    x, y = points[:, 0], points[:, 1]
    if not (np.isfinite(points).all() and (x >= 0).all() and (x < w).all() and (y >= 0).all() and (y < h).all()):
        raise ValidationError(
            f"record {record_id!r}: point coordinates outside image bounds {w}x{h}"
        )


def write_dataset(records: list[ImageRecord], out_dir, manifest_name: str = "manifest.jsonl") -> Path:
    """Save records as PNGs plus a JSON Lines manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / manifest_name
    with open(manifest, "w", encoding="utf-8") as fh:
        for rec in records:
            fname = f"{rec.id}.png"
            Image.fromarray(rec.image).save(out_dir / fname)
            row = {"id": rec.id, "image": fname, "points": np.asarray(rec.points, dtype=np.float64).tolist()}
            fh.write(json.dumps(row) + "\n")
    return manifest


def generate_synthetic(
    n_images: int,
    *,
    size_range: tuple[int, int] = (192, 512),
    count_range: tuple[int, int] = (0, 60),
    seed: int = 0,
    blob_radius_range: tuple[float, float] = (4.0, 8.0),
    id_prefix: str = "synth",
) -> list[ImageRecord]:
    """Render synthetic crowd images: dark blobs on a noisy light background.

    Blob centres are the annotation points (quantised to quarter-pixel so
    flip arithmetic stays exact). Raises GenerationError when the requested
    count cannot fit the image area.
    """
    rng = np.random.default_rng(seed)
    r_min, r_max = blob_radius_range
    records = []
    for i in range(n_images):
        h = int(rng.integers(size_range[0], size_range[1] + 1))
        w = int(rng.integers(size_range[0], size_range[1] + 1))
        count = int(rng.integers(count_range[0], count_range[1] + 1))
        if count > 0:
            if min(h, w) <= 2 * r_max:
                raise GenerationError(
                    f"image {h}x{w} too small for blobs of radius {r_max}"
                )
            capacity = (h * w) // int((2 * r_min) ** 2)
            if count > capacity:
                raise GenerationError(
                    f"cannot place {count} blobs of radius >= {r_min} in a {h}x{w} image"
                )

        base = rng.uniform(150.0, 215.0)
        img = np.full((h, w, 3), base, dtype=np.float64)
        img += rng.normal(0.0, 10.0, size=(h, w, 3))
        gy, gx = rng.uniform(-20.0, 20.0, size=2)
        yy = np.linspace(-0.5, 0.5, h)[:, None]
        xx = np.linspace(-0.5, 0.5, w)[None, :]
        img += (gy * yy + gx * xx)[:, :, None]

        points = np.zeros((count, 2), dtype=np.float64)
        for k in range(count):
            rad = rng.uniform(r_min, r_max)
            x = np.round(rng.uniform(rad, w - rad) * 4.0) / 4.0
            y = np.round(rng.uniform(rad, h - rad) * 4.0) / 4.0
            dark = rng.uniform(45.0, 110.0)
            x0, x1 = int(math.floor(x - rad)), int(math.ceil(x + rad))
            y0, y1 = int(math.floor(y - rad)), int(math.ceil(y + rad))
            x0, x1 = max(x0, 0), min(x1, w - 1)
            y0, y1 = max(y0, 0), min(y1, h - 1)
            ys = np.arange(y0, y1 + 1, dtype=np.float64)[:, None]
            xs = np.arange(x0, x1 + 1, dtype=np.float64)[None, :]
            d2 = ((xs - x) ** 2 + (ys - y) ** 2) / (rad * rad)
            weight = np.clip(1.0 - d2, 0.0, None)
            img[y0 : y1 + 1, x0 : x1 + 1] -= dark * weight[:, :, None]
            points[k] = (x, y)

        image = np.clip(img, 0.0, 255.0).astype(np.uint8)
        records.append(ImageRecord(id=f"{id_prefix}_{i:04d}", image=image, points=points))
    return records


def sample_training_patches(
    records: list[ImageRecord],
    n_patches: int,
    *,
    sizes: tuple[int, ...] = (128, 256, 512),
    out_size: int = 256,
    seed: int = 0,
    flip: bool = True,
) -> list[Patch]:
    """Sample random square crops, resize them to ``out_size``, optionally
    double the set with horizontal flips.

    Each draw picks a record uniformly, then a crop size uniformly among the
    sizes that fit that record. Point coordinates are scaled with the crop
    (p' = p * out_size / size), which keeps every in-crop point inside
    [0, out_size). Records too small for every size are skipped; if none are
    usable a SamplingError is raised.
    """
    rng = np.random.default_rng(seed)
    min_size = min(sizes)
    usable = [r for r in records if min(r.image.shape[0], r.image.shape[1]) >= min_size]
    if not usable:
        raise SamplingError(
            f"no record is at least {min_size}px on both sides; cannot sample crops"
        )
    patches: list[Patch] = []
    for _ in range(n_patches):
        rec = usable[int(rng.integers(len(usable)))]
        h, w = rec.image.shape[:2]
        fitting = [s for s in sizes if s <= min(h, w)]
        size = int(fitting[int(rng.integers(len(fitting)))])
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        patches.append(crop_patch(rec, top, left, size, out_size=out_size))
    if flip:
        patches = patches + [hflip_patch(p) for p in patches]
    return patches


def crop_patch(rec: ImageRecord, top: int, left: int, size: int, *, out_size: int = 256) -> Patch:
    """Cut a size x size crop at (top, left) and resize it to out_size."""
    tile = rec.image[top : top + size, left : left + size]
    if tile.shape[0] != size or tile.shape[1] != size:
        raise ValidationError(
            f"crop ({top},{left}) size {size} exceeds image {rec.image.shape[:2]}"
        )
    pts = rec.points
    if len(pts):
        m = (
            (pts[:, 0] >= left)
            & (pts[:, 0] < left + size)
            & (pts[:, 1] >= top)
            & (pts[:, 1] < top + size)
        )
        local = pts[m] - np.array([left, top], dtype=np.float64)
    else:
        local = np.zeros((0, 2), dtype=np.float64)
    chw = tile.transpose(2, 0, 1).astype(np.float64)
    if size != out_size:
        chw = bilinear_resize(chw, (out_size, out_size))
        local = local * (out_size / size)
    return Patch(
        pixels=chw.astype(np.float32),
        points=local,
        origin=(top, left),
        source_id=rec.id,
    )

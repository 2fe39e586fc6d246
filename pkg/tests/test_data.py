"""Labelling, rasterisation, manifests, synthetic data, patch sampling."""

import json
from fractions import Fraction

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchcount import (
    CrowdClass,
    generate_synthetic,
    label_patch,
    load_manifest,
    make_gt_segmap,
    write_dataset,
)
from patchcount.data import (
    DatasetStats,
    ImageRecord,
    Patch,
    crop_patch,
    hflip_patch,
    sample_training_patches,
)
from patchcount.errors import (
    GenerationError,
    ManifestError,
    SamplingError,
    ValidationError,
)


def oracle_label(cc, cc_max):
    """Exact rational thresholds: <=5% low, <=20% medium, else high."""
    if cc == 0:
        return CrowdClass.NCP
    frac = Fraction(cc, cc_max)
    if frac <= Fraction(1, 20):
        return CrowdClass.LCP
    if frac <= Fraction(1, 5):
        return CrowdClass.MCP
    return CrowdClass.HCP


def test_label_frozen_cases():
    # cc_max = 100: boundaries at 5 (inclusive low) and 20 (inclusive medium)
    assert label_patch(0, 100) == CrowdClass.NCP
    assert label_patch(1, 100) == CrowdClass.LCP
    assert label_patch(5, 100) == CrowdClass.LCP
    assert label_patch(6, 100) == CrowdClass.MCP
    assert label_patch(20, 100) == CrowdClass.MCP
    assert label_patch(21, 100) == CrowdClass.HCP
    assert label_patch(500, 100) == CrowdClass.HCP
    # cc_max = 1: every nonzero count is high-density
    assert label_patch(1, 1) == CrowdClass.HCP


def test_label_matches_rational_oracle():
    for cc_max in (1, 7, 100, 997):
        for cc in range(0, 2 * cc_max + 1):
            assert label_patch(cc, cc_max) == oracle_label(cc, cc_max), (cc, cc_max)


@given(cc=st.integers(0, 10_000), cc_max=st.integers(1, 5_000))
@settings(deadline=None, max_examples=300)
def test_label_total_and_monotone(cc, cc_max):
    lab = label_patch(cc, cc_max)
    assert lab in CrowdClass
    if cc > 0:
        assert label_patch(cc + 1, cc_max) >= lab


def test_label_rejects_bad_input():
    with pytest.raises(ValidationError):
        label_patch(-1, 10)
    with pytest.raises(ValidationError):
        label_patch(3, 0)
    with pytest.raises(ValidationError):
        DatasetStats(cc_max=0)


def test_segmap_frozen_disk():
    m = make_gt_segmap(np.array([[128.0, 128.0]]), 8.0, (256, 256))
    assert m.shape == (256, 256)
    assert m.dtype == np.uint8
    assert int(m.sum()) == 197  # lattice points with (x-128)^2 + (y-128)^2 <= 64
    assert m[128, 128] == 1 and m[128, 136] == 1 and m[128, 137] == 0


def test_segmap_empty_and_pooling():
    assert make_gt_segmap(np.zeros((0, 2)), 8.0, (64, 64)).sum() == 0
    pts = np.array([[10.0, 10.0], [200.0, 130.0]])
    full = make_gt_segmap(pts, 8.0, (256, 256))
    pooled = make_gt_segmap(pts, 8.0, (64, 64))
    # independent max-pool over 4x4 cells
    ref = np.zeros((64, 64), dtype=np.uint8)
    for r in range(64):
        for c in range(64):
            ref[r, c] = full[4 * r : 4 * r + 4, 4 * c : 4 * c + 4].max()
    npt.assert_array_equal(pooled, ref)


def test_segmap_monotone_in_points():
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 256, size=(5, 2))
    prev = np.zeros((32, 32), dtype=np.uint8)
    for k in range(1, 6):
        cur = make_gt_segmap(pts[:k], 8.0, (32, 32))
        assert (cur >= prev).all()
        prev = cur


def test_segmap_resolution_must_divide():
    with pytest.raises(ValidationError):
        make_gt_segmap(np.zeros((0, 2)), 8.0, (100, 100), patch_size=256)


def _patch(seed=0, size=256, n=4):
    rng = np.random.default_rng(seed)
    return Patch(
        pixels=rng.uniform(0, 255, size=(3, size, size)).astype(np.float32),
        points=np.round(rng.uniform(0, size, size=(n, 2)) * 4) / 4,
    )


def test_hflip_involution_and_mapping():
    p = _patch(seed=3)
    pp = hflip_patch(hflip_patch(p))
    assert np.array_equal(pp.pixels, p.pixels)
    assert np.array_equal(pp.points, p.points)
    q = Patch(pixels=np.zeros((3, 256, 256), np.float32), points=np.array([[10.0, 30.0]]))
    flipped = hflip_patch(q)
    assert flipped.points[0, 0] == 245.0 and flipped.points[0, 1] == 30.0


def test_synthetic_determinism_and_counts():
    a = generate_synthetic(6, size_range=(64, 160), count_range=(0, 30), seed=11)
    b = generate_synthetic(6, size_range=(64, 160), count_range=(0, 30), seed=11)
    assert len(a) == 6
    for ra, rb in zip(a, b):
        assert ra.id == rb.id
        assert np.array_equal(ra.image, rb.image)
        assert np.array_equal(ra.points, rb.points)
        assert ra.gt_count == len(ra.points)
        h, w = ra.image.shape[:2]
        if len(ra.points):
            assert ra.points[:, 0].max() < w and ra.points[:, 1].max() < h
            assert ra.points.min() >= 0


def test_synthetic_rejects_impossible():
    with pytest.raises(GenerationError):
        generate_synthetic(1, size_range=(16, 16), count_range=(50, 50), seed=0)


def test_manifest_roundtrip(tmp_path):
    records = generate_synthetic(3, size_range=(64, 96), count_range=(0, 12), seed=4)
    manifest = write_dataset(records, tmp_path)
    loaded = load_manifest(manifest)
    assert [r.id for r in loaded] == [r.id for r in records]
    for a, b in zip(loaded, records):
        assert np.array_equal(a.image, b.image)
        npt.assert_allclose(a.points, b.points)


def test_manifest_errors(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "nope.jsonl")
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    with pytest.raises(ManifestError):
        load_manifest(bad)
    missing_img = tmp_path / "missing.jsonl"
    missing_img.write_text(json.dumps({"id": "x", "image": "gone.png", "points": []}) + "\n")
    with pytest.raises(ManifestError):
        load_manifest(missing_img)


def test_manifest_rejects_out_of_bounds_points(tmp_path):
    rec = generate_synthetic(1, size_range=(64, 64), count_range=(0, 0), seed=0)[0]
    manifest = write_dataset([rec], tmp_path)
    rows = [json.loads(line) for line in manifest.read_text().splitlines()]
    rows[0]["points"] = [[999.0, 10.0]]
    manifest.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    with pytest.raises(ValidationError):
        load_manifest(manifest)


def test_crop_patch_points_and_scaling():
    image = np.zeros((300, 300, 3), dtype=np.uint8)
    points = np.array([[100.0, 100.0], [10.0, 10.0], [227.9, 100.0]])
    rec = ImageRecord(id="r", image=image, points=points)
    # crop [100, 228) x [100, 228), size 128, resized to 256: scale factor 2
    p = crop_patch(rec, 100, 100, 128, out_size=256)
    assert p.gt_count == 2
    got = sorted(map(tuple, p.points))
    npt.assert_allclose(got[0], (0.0, 0.0))
    npt.assert_allclose(got[1], (255.8, 0.0))
    assert p.pixels.shape == (3, 256, 256)


def test_sample_training_patches_flip_doubles():
    records = generate_synthetic(4, size_range=(300, 520), count_range=(5, 30), seed=9)
    plain = sample_training_patches(records, 6, seed=5, flip=False)
    doubled = sample_training_patches(records, 6, seed=5, flip=True)
    assert len(plain) == 6 and len(doubled) == 12
    for i in range(6):
        assert np.array_equal(doubled[i].pixels, plain[i].pixels)
        assert np.array_equal(doubled[i + 6].pixels, hflip_patch(plain[i]).pixels)
        assert doubled[i].gt_count == doubled[i + 6].gt_count
    for p in doubled:
        assert p.pixels.shape == (3, 256, 256)
        if p.gt_count:
            assert p.points.min() >= 0 and p.points.max() < 256


def test_sample_training_patches_needs_fitting_record():
    small = generate_synthetic(2, size_range=(64, 64), count_range=(0, 3), seed=2)
    with pytest.raises(SamplingError):
        sample_training_patches(small, 4, sizes=(128, 256), seed=0)

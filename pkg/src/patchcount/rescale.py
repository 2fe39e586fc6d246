"""Class-conditional patch rescaling.

Every patch entering the counting network is first reshaped according to its
density class so that the apparent head scale is normalised:

* NCP  -> dropped (no network patches, the patch contributes count 0)
* LCP  -> downscaled 2x and zero-padded back to full size, centred
* MCP  -> passed through unchanged
* HCP  -> split into four quadrants (TL, TR, BL, BR), each upscaled 2x

So one input patch becomes 0, 1, 1 or 4 network patches respectively, all of
the original spatial size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CrowdClass
from .errors import ValidationError
from .interp import bilinear_resize

QUADRANT_ORDER = ("tl", "tr", "bl", "br")


@dataclass
class RescaleOutcome:
    patches: list[np.ndarray]  # each (3, S, S) float64
    provenance: list[str]  # per patch: identity / downscale-pad / upscale-<quadrant>


def quadrant_origins(size: int) -> list[tuple[str, int, int]]:
    """(tag, row0, col0) for the four half-size quadrants, in pinned order."""
    half = size // 2
    return [("tl", 0, 0), ("tr", 0, half), ("bl", half, 0), ("br", half, half)]


def rescale_patch(pixels: np.ndarray, label: CrowdClass) -> RescaleOutcome:
    """Apply the density-class rescaling recipe to one (3, S, S) patch."""
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise ValidationError(f"expected (3, S, S) patch, got shape {pixels.shape}")
    size = pixels.shape[1]
    if pixels.shape[2] != size or size % 4:
        raise ValidationError(f"patch must be square with size divisible by 4, got {pixels.shape}")

    if label == CrowdClass.NCP:
        return RescaleOutcome(patches=[], provenance=[])

    if label == CrowdClass.LCP:
        half = size // 2
        quarter = size // 4
        down = bilinear_resize(pixels, (half, half))
        canvas = np.zeros((3, size, size), dtype=np.float64)
        canvas[:, quarter : quarter + half, quarter : quarter + half] = down
        return RescaleOutcome(patches=[canvas], provenance=["downscale-pad"])

    if label == CrowdClass.MCP:
        return RescaleOutcome(patches=[np.asarray(pixels, dtype=np.float64)], provenance=["identity"])

    if label == CrowdClass.HCP:
        half = size // 2
        patches = []
        tags = []
        for tag, r0, c0 in quadrant_origins(size):
            quad = pixels[:, r0 : r0 + half, c0 : c0 + half]
            patches.append(bilinear_resize(quad, (size, size)))
            tags.append(f"upscale-{tag}")
        return RescaleOutcome(patches=patches, provenance=tags)

    raise ValidationError(f"unknown crowd class {label!r}")

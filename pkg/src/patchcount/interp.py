"""Bilinear resampling with half-pixel-center alignment.

Source coordinates for output pixel d are s = (d + 0.5) * (in / out) - 0.5,
clamped to the valid range, interpolated from the four surrounding texels.
No anti-alias prefilter is applied (plain bilinear, also when downscaling).
"""

from __future__ import annotations

import numpy as np


def bilinear_resize(image: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize a (C, H, W) image to (C, out_h, out_w).

    Computation is done in float64 and the result is returned as float64
    regardless of the input dtype. When the output size equals the input
    size the pixel values are copied through unchanged.
    """
    if image.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got shape {image.shape}")
    out_h, out_w = int(out_hw[0]), int(out_hw[1])
    if out_h < 1 or out_w < 1:
        raise ValueError(f"invalid output size {out_hw}")
    img = np.asarray(image, dtype=np.float64)
    _, in_h, in_w = img.shape

    y0, y1, fy = _axis_weights(in_h, out_h)
    x0, x1, fx = _axis_weights(in_w, out_w)

    # gather the four neighbours; fancy indexing broadcasts rows x cols
    v00 = img[:, y0[:, None], x0[None, :]]
    v01 = img[:, y0[:, None], x1[None, :]]
    v10 = img[:, y1[:, None], x0[None, :]]
    v11 = img[:, y1[:, None], x1[None, :]]

    fx = fx[None, None, :]
    fy = fy[None, :, None]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy


def _axis_weights(in_size: int, out_size: int):
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, src - lo

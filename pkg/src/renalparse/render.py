"""Slice overlays with the kidney/tumor/vein/artery colour coding."""

from __future__ import annotations

import numpy as np
from PIL import Image

from renalparse.volgrid import ClassId, LabelMap, Volume

COLORS = {
    ClassId.KIDNEY: (255, 255, 0),  # yellow
    ClassId.TUMOR: (0, 0, 255),  # blue
    ClassId.VEIN: (0, 255, 0),  # green
    ClassId.ARTERY: (255, 0, 0),  # red
}
OPACITY = 0.4


def overlay_slice(image: Volume, labels: LabelMap, axis: int, slice_index: int, window=None) -> np.ndarray:
    """RGB uint8 array of one slice; rows/cols are the remaining axes in order.

    Gray levels map ``window`` (default: the volume's min/max) onto 0..255;
    labelled pixels become ``(1 - OPACITY) * gray + OPACITY * colour``.
    """
    if image.shape != labels.shape:
        raise ValueError(f"image {image.shape} and labels {labels.shape} differ in shape")
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    n = image.shape[axis]
    if not 0 <= slice_index < n:
        raise IndexError(f"slice {slice_index} out of range for axis {axis} of size {n}")
    lo, hi = window if window is not None else (float(image.data.min()), float(image.data.max()))
    img = np.take(np.asarray(image.data, dtype=np.float64), slice_index, axis=axis)
    lab = np.take(labels.data, slice_index, axis=axis)
    gray = np.zeros_like(img) if hi <= lo else (np.clip(img, lo, hi) - lo) / (hi - lo) * 255.0
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    for cls, color in COLORS.items():
        sel = lab == cls
        rgb[sel] = (1.0 - OPACITY) * gray[sel, None] + OPACITY * np.asarray(color, dtype=np.float64)
    return np.rint(rgb).astype(np.uint8)


def render_overlay(image: Volume, labels: LabelMap, axis: int, slice_index: int, out, window=None) -> None:
    Image.fromarray(overlay_slice(image, labels, axis, slice_index, window), mode="RGB").save(out, format="PNG")

"""Intensity preprocessing, resampling and stochastic augmentation.

Two branches share these tools:

* branch A (U-Net): percentile clipping + z-score with global foreground statistics,
* branch B (SegResNet): range clipping/scaling + per-volume normalization, then the
  random augmentation stack (noise, rotation, zoom, flip, elastic).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from renalparse.volgrid import LabelMap, Volume


@dataclass
class ClipSpec:
    lo_percentile: float = 0.5
    hi_percentile: float = 99.5

    def __post_init__(self):
        if not 0.0 <= self.lo_percentile < self.hi_percentile <= 100.0:
            raise ValueError(
                f"need 0 <= lo < hi <= 100, got ({self.lo_percentile}, {self.hi_percentile})"
            )


@dataclass
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.std)) or self.std <= 0:
            raise ValueError(f"invalid normalization stats mean={self.mean} std={self.std}")

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2)

    @classmethod
    def load(cls, path) -> "NormStats":
        with open(path) as f:
            d = json.load(f)
        return cls(float(d["mean"]), float(d["std"]))


@dataclass
class AugmentConfig:
    p_noise: float = 0.5
    p_rotate: float = 0.5
    p_zoom: float = 0.5
    p_flip: float = 0.5
    p_elastic: float = 0.5
    rotation_range: tuple[float, float] = (-15.0, 15.0)  # degrees, in-plane (x, y)
    zoom_range: tuple[float, float] = (0.9, 1.1)
    flip_axes: tuple[int, ...] = (0, 1, 2)
    elastic_grid: int = 16  # control-point spacing in voxels
    elastic_max_disp: float = 4.0  # voxels
    noise_sigma: float = 0.1
    seed: int | None = None

    def __post_init__(self):
        for name in ("p_noise", "p_rotate", "p_zoom", "p_flip", "p_elastic"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        self.rotation_range = tuple(float(r) for r in self.rotation_range)
        self.zoom_range = tuple(float(z) for z in self.zoom_range)
        self.flip_axes = tuple(int(a) for a in self.flip_axes)
        lo, hi = self.zoom_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"zoom range must lie in (0, inf) with lo <= hi, got {self.zoom_range}")
        if self.rotation_range[0] > self.rotation_range[1]:
            raise ValueError(f"rotation range reversed: {self.rotation_range}")
        if any(a not in (0, 1, 2) for a in self.flip_axes):
            raise ValueError(f"flip axes must be within (0, 1, 2), got {self.flip_axes}")
        if self.elastic_grid < 1 or self.elastic_max_disp < 0 or self.noise_sigma < 0:
            raise ValueError("elastic grid must be >= 1; displacement and noise sigma >= 0")


# ---------------------------------------------------------------- intensities


def percentile_bounds(values, clip: ClipSpec) -> tuple[float, float]:
    """Percentiles by linear interpolation between closest ranks."""
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = np.percentile(values, [clip.lo_percentile, clip.hi_percentile], method="linear")
    return float(lo), float(hi)


def clip_to_bounds(v: Volume, lo: float, hi: float) -> Volume:
    return v.with_data(np.clip(v.data, lo, hi).astype(v.data.dtype, copy=False))


def clip_percentiles(v: Volume, c: ClipSpec | None = None) -> Volume:
    """Clip a volume to its own ``[lo, hi]`` percentile values."""
    lo, hi = percentile_bounds(v.data, c or ClipSpec())
    return clip_to_bounds(v, lo, hi)


class NoForegroundError(ValueError):
    pass


def compute_foreground_stats(cases) -> NormStats:
    """Pooled mean and population std of intensities where label != 0."""
    chunks = [np.asarray(v.data, dtype=np.float64)[m.data != 0] for v, m in cases]
    n = sum(c.size for c in chunks)
    if n == 0:
        raise NoForegroundError("no foreground voxels in the given cases")
    mean = math.fsum(math.fsum(c) for c in chunks) / n
    var = math.fsum(math.fsum((c - mean) ** 2) for c in chunks) / n
    return NormStats(mean, math.sqrt(var))


def zscore(v: Volume, s: NormStats) -> Volume:
    return v.with_data((np.asarray(v.data, dtype=np.float64) - s.mean) / s.std)


def scale_intensity_range(v: Volume, a_min: float, a_max: float) -> Volume:
    """Clip to ``[a_min, a_max]`` and map linearly onto ``[0, 1]``."""
    if a_max <= a_min:
        raise ValueError(f"a_max must exceed a_min, got ({a_min}, {a_max})")
    d = np.clip(np.asarray(v.data, dtype=np.float64), a_min, a_max)
    return v.with_data((d - a_min) / (a_max - a_min))


def normalize_channel(v: Volume) -> Volume:
    """Per-volume z-score; a constant volume maps to zeros."""
    d = np.asarray(v.data, dtype=np.float64)
    std = d.std()
    return v.with_data((d - d.mean()) / std if std > 0 else np.zeros_like(d))


# ---------------------------------------------------------------- resampling


def _source_coords(n_out: int, ratio: float) -> np.ndarray:
    # voxel centers aligned: out center (i + 0.5) * target == in center (j + 0.5) * source
    return (np.arange(n_out) + 0.5) * ratio - 0.5


def _nearest_along(data, axis, n_out, ratio):
    idx = np.floor((np.arange(n_out) + 0.5) * ratio).astype(np.intp)
    return np.take(data, np.clip(idx, 0, data.shape[axis] - 1), axis=axis)


def resample(v, target_spacing):
    """Resample to ``target_spacing`` (mm).

    Images: cubic spline in-plane (x, y), nearest neighbour along z.
    Label maps: nearest neighbour on every axis.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or any(t <= 0 for t in target):
        raise ValueError(f"target spacing must be 3 positive values, got {target_spacing}")
    ratios = [t / s for t, s in zip(target, v.spacing)]
    out_shape = [int(round(n / r)) for n, r in zip(v.shape, ratios)]
    if any(n == 0 for n in out_shape):
        raise ValueError(f"degenerate output shape {tuple(out_shape)} for spacing {target}")
    if np.allclose(ratios, 1.0, rtol=0, atol=1e-12):
        return type(v)(v.data.copy(), target)

    if isinstance(v, LabelMap):
        d = v.data
        for ax in range(3):
            d = _nearest_along(d, ax, out_shape[ax], ratios[ax])
        return LabelMap(np.ascontiguousarray(d), target)
    if not isinstance(v, Volume):
        raise TypeError(f"expected Volume or LabelMap, got {type(v).__name__}")

    d = _nearest_along(np.asarray(v.data, dtype=np.float64), 2, out_shape[2], ratios[2])
    if ratios[0] != 1.0 or ratios[1] != 1.0:
        cx = _source_coords(out_shape[0], ratios[0])
        cy = _source_coords(out_shape[1], ratios[1])
        gx, gy = np.meshgrid(cx, cy, indexing="ij")
        coords = np.stack([gx, gy])
        out = np.empty((out_shape[0], out_shape[1], d.shape[2]))
        for z in range(d.shape[2]):
            out[:, :, z] = ndimage.map_coordinates(d[:, :, z], coords, order=3, mode="mirror")
        d = out
    return Volume(d.astype(v.data.dtype), target)


def resample_labels_to(m: LabelMap, spacing, shape) -> LabelMap:
    """Nearest-neighbour resample back onto a reference grid (exact ``shape``)."""
    from renalparse.volgrid import crop_or_pad

    out = resample(m, spacing)
    return crop_or_pad(out, shape) if out.shape != tuple(shape) else out


# ---------------------------------------------------------------- augmentation


def _warp(image, labels, coords):
    img = ndimage.map_coordinates(image, coords, order=1, mode="nearest")
    lab = ndimage.map_coordinates(labels, coords, order=0, mode="constant", cval=0)
    return img, lab


def _identity_grid(shape):
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"))


def _affine_coords(shape, matrix):
    """Sample coordinates for ``out(o) = in(matrix @ (o - c) + c)`` about the grid center."""
    grid = _identity_grid(shape)
    center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    rel = grid.reshape(3, -1) - center[:, None]
    return (matrix @ rel + center[:, None]).reshape(grid.shape)


def rotate_xy(image, labels, degrees):
    """Rotate counter-clockwise in the (x, y) plane: +90 maps (x, y) to (-y, x) about the center."""
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    # inverse rotation gives source coordinates
    inv = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    inv[np.abs(inv) < 1e-12] = 0.0
    return _warp(image, labels, _affine_coords(image.shape, inv))


def zoom(image, labels, factor):
    return _warp(image, labels, _affine_coords(image.shape, np.eye(3) / factor))


def flip(image, labels, axis):
    return np.flip(image, axis).copy(), np.flip(labels, axis).copy()


def elastic(image, labels, rng, grid_spacing=16, max_disp=4.0):
    shape = image.shape
    coarse = tuple(int(math.ceil((n - 1) / grid_spacing)) + 1 for n in shape)
    disp = rng.uniform(-max_disp, max_disp, size=(3, *coarse))
    pos = _identity_grid(shape) / grid_spacing
    fine = np.stack([ndimage.map_coordinates(d, pos, order=1, mode="nearest") for d in disp])
    return _warp(image, labels, _identity_grid(shape) + fine)


def augment(v: Volume, m: LabelMap, cfg: AugmentConfig, rng: np.random.Generator):
    """Random noise, rotation, zoom, flip and elastic deformation, in that order.

    Each transform fires independently with its own probability. The image
    is interpolated trilinearly, the labels by nearest neighbour on the same
    sampling grid, so the pair stays voxel-aligned.
    """
    if v.shape != m.shape:
        raise ValueError(f"image {v.shape} and labels {m.shape} differ in shape")
    img = np.asarray(v.data, dtype=np.float64)
    lab = m.data
    if rng.random() < cfg.p_noise:
        img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    if rng.random() < cfg.p_rotate:
        img, lab = rotate_xy(img, lab, rng.uniform(*cfg.rotation_range))
    if rng.random() < cfg.p_zoom:
        img, lab = zoom(img, lab, rng.uniform(*cfg.zoom_range))
    if rng.random() < cfg.p_flip and cfg.flip_axes:
        img, lab = flip(img, lab, cfg.flip_axes[rng.integers(len(cfg.flip_axes))])
    if rng.random() < cfg.p_elastic:
        img, lab = elastic(img, lab, rng, cfg.elastic_grid, cfg.elastic_max_disp)
    return Volume(img.astype(v.data.dtype), v.spacing), LabelMap(lab, m.spacing)

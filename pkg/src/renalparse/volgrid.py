"""Volumetric data model (images and label maps) and NIfTI-1 I/O.

Label convention, used everywhere in the package::

    0 background, 1 kidney, 2 tumor, 3 vein, 4 artery
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError


class ClassId(enum.IntEnum):
    BACKGROUND = 0
    KIDNEY = 1
    TUMOR = 2
    VEIN = 3
    ARTERY = 4

    @property
    def label(self) -> str:
        return self.name.lower()


FOREGROUND = (ClassId.KIDNEY, ClassId.TUMOR, ClassId.VEIN, ClassId.ARTERY)
N_CLASSES = len(ClassId)


class VolumeIOError(Exception):
    """Base class for volume file errors."""


class MissingFileError(VolumeIOError, FileNotFoundError):
    pass


class MalformedHeaderError(VolumeIOError):
    pass


class NotThreeDError(VolumeIOError):
    pass


class InvalidLabelError(ValueError):
    pass


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise ValueError(f"spacing must have 3 components, got {spacing}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing components must be positive, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class Volume:
    """3D intensity grid (HU or normalized) with per-axis spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"Volume data must be 3D, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise ValueError("Volume data contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """3D integer grid over the five classes, stored as uint8."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"LabelMap data must be 3D, got shape {data.shape}")
        if np.issubdtype(data.dtype, np.floating):
            if not np.all(np.isfinite(data)) or np.any(data != np.round(data)):
                raise InvalidLabelError("label values must be integers")
        elif not (np.issubdtype(data.dtype, np.integer) or data.dtype == bool):
            raise InvalidLabelError(f"unsupported label dtype {data.dtype}")
        if data.size and (data.min() < 0 or data.max() >= N_CLASSES):
            bad = sorted(set(np.unique(data).tolist()) - set(range(N_CLASSES)))
            raise InvalidLabelError(f"label values {bad} outside 0..{N_CLASSES - 1}")
        object.__setattr__(self, "data", data.astype(np.uint8, copy=False))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data) -> "LabelMap":
        return LabelMap(data, self.spacing)

    def mask(self, cls) -> np.ndarray:
        return self.data == int(cls)


def _affine(spacing):
    return np.diag([*spacing, 1.0])


def _save(data, spacing, path, dtype):
    path = os.fspath(path)
    parent = os.path.dirname(path) or "."
    if not os.path.isdir(parent) or not os.access(parent, os.W_OK):
        raise PermissionError(f"cannot write to {path!r}")
    img = nib.Nifti1Image(np.asarray(data, dtype=dtype), _affine(spacing))
    img.header.set_zooms(spacing)
    img.header.set_xyzt_units("mm")
    img.set_qform(_affine(spacing), code=1)
    img.set_sform(_affine(spacing), code=1)
    nib.save(img, path)


def _load(path):
    path = os.fspath(path)
    if not os.path.exists(path):
        raise MissingFileError(f"no such file: {path!r}")
    try:
        img = nib.load(path)
        if not isinstance(img, (nib.Nifti1Image, nib.Nifti2Image)):
            raise MalformedHeaderError(f"{path!r} is not a NIfTI-1 image")
        shape = img.shape
        zooms = img.header.get_zooms()
    except (ImageFileError, EOFError, OSError, ValueError) as exc:
        raise MalformedHeaderError(f"cannot parse NIfTI header of {path!r}: {exc}") from exc
    if len(shape) != 3:
        raise NotThreeDError(f"non-3D image: {path!r} has shape {shape}")
    data = np.asanyarray(img.dataobj)
    return data, tuple(float(z) for z in zooms[:3])


def save_volume(v: Volume, path) -> None:
    """Write an image as NIfTI-1 float32 (gzip when ``path`` ends in .gz)."""
    _save(v.data, v.spacing, path, np.float32)


def load_volume(path) -> Volume:
    data, spacing = _load(path)
    return Volume(np.asarray(data, dtype=np.float32), spacing)


def save_labelmap(m: LabelMap, path) -> None:
    """Write a label map as NIfTI-1 uint8."""
    if not isinstance(m, LabelMap):
        raise TypeError(f"expected LabelMap, got {type(m).__name__}")
    m = LabelMap(m.data, m.spacing)  # data may have been mutated in place since construction
    _save(m.data, m.spacing, path, np.uint8)


def load_labelmap(path) -> LabelMap:
    data, spacing = _load(path)
    return LabelMap(np.asarray(data), spacing)


def crop_or_pad_array(data: np.ndarray, target_shape, fill=0) -> np.ndarray:
    """Center-crop or symmetrically pad ``data`` to ``target_shape``.

    Odd differences put the extra voxel on the high side, both when cropping
    and padding, so padding then cropping back is the identity.
    """
    target_shape = tuple(int(t) for t in target_shape)
    if len(target_shape) != data.ndim or any(t <= 0 for t in target_shape):
        raise ValueError(f"invalid target shape {target_shape} for {data.ndim}D data")
    slices, pads = [], []
    for n, t in zip(data.shape, target_shape):
        if t < n:
            lo = (n - t) // 2
            slices.append(slice(lo, lo + t))
            pads.append((0, 0))
        else:
            lo = (t - n) // 2
            slices.append(slice(None))
            pads.append((lo, t - n - lo))
    out = data[tuple(slices)]
    if any(p != (0, 0) for p in pads):
        out = np.pad(out, pads, mode="constant", constant_values=fill)
    return np.ascontiguousarray(out)


def crop_or_pad(v, target_shape, fill=None):
    """Crop/pad a Volume or LabelMap; ``fill`` defaults to the image minimum or background."""
    if isinstance(v, LabelMap):
        fill = 0 if fill is None else fill
        return LabelMap(crop_or_pad_array(v.data, target_shape, fill), v.spacing)
    if isinstance(v, Volume):
        fill = float(v.data.min()) if fill is None else fill
        return Volume(crop_or_pad_array(v.data, target_shape, fill), v.spacing)
    raise TypeError(f"expected Volume or LabelMap, got {type(v).__name__}")

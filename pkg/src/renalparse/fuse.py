"""Label decoding, class-wise two-model ensembling and largest-component filtering."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from renalparse import kernels
from renalparse.volgrid import FOREGROUND, ClassId, LabelMap, crop_or_pad_array

SOURCES = ("A", "B")
STAGES = ("per_model", "post_merge")


def _class(c) -> ClassId:
    if isinstance(c, str):
        return ClassId[c.upper()]
    return ClassId(int(c))


@dataclass
class EnsembleSpec:
    """Which model supplies each foreground class. Default: tumor from B, the rest from A."""

    source_per_class: dict = field(
        default_factory=lambda: {"kidney": "A", "tumor": "B", "vein": "A", "artery": "A"}
    )

    def __post_init__(self):
        parsed = {}
        for k, v in self.source_per_class.items():
            c = _class(k)
            if c == ClassId.BACKGROUND:
                raise ValueError("background has no source model")
            if v not in SOURCES:
                raise ValueError(f"source for {c.label} must be one of {SOURCES}, got {v!r}")
            parsed[c] = v
        missing = [c.label for c in FOREGROUND if c not in parsed]
        if missing:
            raise ValueError(f"no source model for classes {missing}")
        self.source_per_class = {c.label: parsed[c] for c in FOREGROUND}

    def classes_from(self, source) -> list[ClassId]:
        return [c for c in FOREGROUND if self.source_per_class[c.label] == source]


@dataclass
class PostprocessSpec:
    classes_to_filter: tuple = ("kidney", "tumor")
    connectivity: int = 26
    stage: str = "per_model"

    def __post_init__(self):
        classes = tuple(_class(c) for c in self.classes_to_filter)
        if any(c == ClassId.BACKGROUND for c in classes):
            raise ValueError("classes_to_filter must be foreground classes")
        if self.connectivity not in (6, 26):
            raise ValueError(f"connectivity must be 6 or 26, got {self.connectivity}")
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        self.classes_to_filter = tuple(c.label for c in classes)


def argmax_decode(logits, spacing=(1.0, 1.0, 1.0)) -> LabelMap:
    """Per-voxel argmax over the class axis of (1, C, X, Y, Z); ties go to the lowest index."""
    arr = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    if arr.ndim == 5:
        if arr.shape[0] != 1:
            raise ValueError(f"expected a single case, got batch of {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 4:
        raise ValueError(f"expected (1, C, X, Y, Z) logits, got {arr.shape}")
    return LabelMap(np.argmax(arr, axis=0).astype(np.uint8), spacing)


def largest_component(mask, connectivity: int = 26) -> np.ndarray:
    """Keep the largest connected component; ties go to the one holding the raster-first voxel."""
    mask = np.asarray(mask) != 0
    labels, sizes = kernels.label_components(mask, connectivity)
    if len(sizes) <= 1:
        return np.zeros_like(mask)
    # argmax returns the first maximum, i.e. the lowest label = earliest first voxel
    return labels == int(np.argmax(sizes[1:]) + 1)


def postprocess(m: LabelMap, spec: PostprocessSpec | None = None) -> LabelMap:
    spec = spec or PostprocessSpec()
    out = m.data.copy()
    for name in spec.classes_to_filter:
        c = _class(name)
        mask = m.data == c
        keep = largest_component(mask, spec.connectivity)
        out[mask & ~keep] = ClassId.BACKGROUND
    return m.with_data(out)


def ensemble_merge(pred_a: LabelMap, pred_b: LabelMap, spec: EnsembleSpec | None = None) -> LabelMap:
    """Paint A-sourced classes from A, then B-sourced classes from B over them."""
    spec = spec or EnsembleSpec()
    if pred_a.shape != pred_b.shape:
        raise ValueError(f"shape mismatch: {pred_a.shape} vs {pred_b.shape}")
    if not np.allclose(pred_a.spacing, pred_b.spacing, rtol=0, atol=1e-6):
        raise ValueError(f"spacing mismatch: {pred_a.spacing} vs {pred_b.spacing}")
    out = np.zeros(pred_a.shape, dtype=np.uint8)
    for source, pred in (("A", pred_a), ("B", pred_b)):
        for c in spec.classes_from(source):
            out[pred.data == c] = c
    return LabelMap(out, pred_a.spacing)


@torch.no_grad()
def predict_logits(net, image: np.ndarray) -> np.ndarray:
    """Full-volume logits (C, X, Y, Z); pads to the net's divisibility and crops back."""
    div = 2**net.cfg.depth
    shape = image.shape
    padded_shape = tuple(-(-n // div) * div for n in shape)
    x = crop_or_pad_array(np.asarray(image, dtype=np.float32), padded_shape, float(np.min(image)))
    was_training = net.training
    net.eval()
    logits = net(torch.from_numpy(x)[None, None]).logits[0].numpy()
    net.train(was_training)
    out = np.stack([crop_or_pad_array(ch, shape) for ch in logits])
    return out


def predict_labels(net, image: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> LabelMap:
    return argmax_decode(predict_logits(net, image)[None], spacing)

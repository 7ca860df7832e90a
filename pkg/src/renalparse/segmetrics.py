"""DSC, Hausdorff and average Hausdorff distance with anisotropic spacing.

Distances are measured between boundary-voxel centers in mm. A boundary voxel
is a foreground voxel with at least one background 6-neighbour (outside the
grid counts as background). Degenerate cases: both masks empty gives DSC 1
and distances 0; exactly one empty gives DSC 0 and undefined (``None``)
distances.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from renalparse import kernels
from renalparse.volgrid import FOREGROUND, ClassId, LabelMap


def _pair(pred, gt):
    pred = np.asarray(pred) != 0
    gt = np.asarray(gt) != 0
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def dsc(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def boundary(mask) -> np.ndarray:
    mask = np.asarray(mask) != 0
    padded = np.pad(mask, 1, constant_values=False)
    inner = padded[1:-1, 1:-1, 1:-1]
    interior = inner.copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def extract_surface(mask, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Boundary voxel centers in mm, shape (n, 3)."""
    idx = np.argwhere(boundary(mask))
    return idx.astype(np.float64) * np.asarray(spacing, dtype=np.float64)


def _directed(pred, gt, spacing):
    pred, gt = _pair(pred, gt)
    p_any, g_any = pred.any(), gt.any()
    if not p_any and not g_any:
        return np.zeros(1), np.zeros(1)
    if not (p_any and g_any):
        return None
    sp = extract_surface(pred, spacing)
    sg = extract_surface(gt, spacing)
    return kernels.min_distances(sp, sg), kernels.min_distances(sg, sp)


def hausdorff(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float | None:
    d = _directed(pred, gt, spacing)
    if d is None:
        return None
    return float(max(d[0].max(), d[1].max()))


def avg_hausdorff(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float | None:
    d = _directed(pred, gt, spacing)
    if d is None:
        return None
    return float(0.5 * (d[0].mean() + d[1].mean()))


@dataclass
class ClassMetrics:
    dsc: float
    hd: float | None
    ahd: float | None


@dataclass
class MetricsRecord:
    case_id: str
    per_class: dict[str, ClassMetrics] = field(default_factory=dict)

    def __post_init__(self):
        for name, m in self.per_class.items():
            if not 0.0 <= m.dsc <= 1.0:
                raise ValueError(f"{self.case_id}/{name}: dsc {m.dsc} outside [0, 1]")
            if m.hd is not None and (m.hd < 0 or m.ahd is None or m.ahd > m.hd + 1e-12):
                raise ValueError(f"{self.case_id}/{name}: inconsistent hd={m.hd} ahd={m.ahd}")


def evaluate_case(pred: LabelMap, gt: LabelMap, case_id: str = "") -> MetricsRecord:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if not np.allclose(pred.spacing, gt.spacing, rtol=0, atol=1e-6):
        raise ValueError(f"spacing mismatch: {pred.spacing} vs {gt.spacing}")
    per_class = {}
    for c in FOREGROUND:
        p, g = pred.mask(c), gt.mask(c)
        d = _directed(p, g, gt.spacing)
        if d is None:
            hd = ahd = None
        else:
            hd = float(max(d[0].max(), d[1].max()))
            ahd = float(0.5 * (d[0].mean() + d[1].mean()))
        per_class[c.label] = ClassMetrics(dsc(p, g), hd, ahd)
    return MetricsRecord(case_id, per_class)


CLASS_ORDER = tuple(c.label for c in FOREGROUND)
METRIC_ORDER = ("dsc", "hd", "ahd")


def aggregate(records) -> dict:
    """Per-class means (kidney, tumor, vein, artery); undefined distances are excluded and counted."""
    records = sorted(records, key=lambda r: r.case_id)
    if not records:
        raise ValueError("cannot aggregate an empty list of records")
    table = {}
    for name in CLASS_ORDER:
        row = {}
        for metric in METRIC_ORDER:
            vals = [getattr(r.per_class[name], metric) for r in records]
            kept = [v for v in vals if v is not None]
            row[metric] = math.fsum(kept) / len(kept) if kept else None
            row[f"{metric}_excluded"] = len(vals) - len(kept)
        table[name] = row
    return {"n_cases": len(records), "classes": table}


def format_table(agg: dict, title: str = "") -> str:
    """Markdown table laid out Kidney|Tumor|Vein|Artery x DSC|HD|AHD."""
    head = ["Network"] + [f"{c.capitalize()} {m.upper()}" for c in CLASS_ORDER for m in METRIC_ORDER]
    cells = [title or "model"]
    for c in CLASS_ORDER:
        for m in METRIC_ORDER:
            v = agg["classes"][c][m]
            cells.append("n/a" if v is None else f"{v:.3f}")
    return "\n".join(
        ["| " + " | ".join(head) + " |", "|" + "---|" * len(head), "| " + " | ".join(cells) + " |"]
    )


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_case_csv(records, path) -> None:
    """One row per (case, class): case_id,class,dsc,hd_mm,ahd_mm; undefined distances empty."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["case_id", "class", "dsc", "hd_mm", "ahd_mm"])
        for r in sorted(records, key=lambda r: r.case_id):
            for name in CLASS_ORDER:
                m = r.per_class[name]
                w.writerow([r.case_id, name, _fmt(m.dsc), _fmt(m.hd), _fmt(m.ahd)])


def read_case_csv(path) -> list[MetricsRecord]:
    out: dict[str, MetricsRecord] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rec = out.setdefault(row["case_id"], MetricsRecord(row["case_id"]))
            opt = lambda s: None if s == "" else float(s)
            rec.per_class[row["class"]] = ClassMetrics(float(row["dsc"]), opt(row["hd_mm"]), opt(row["ahd_mm"]))
    return list(out.values())


def write_aggregate_json(agg: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(agg, f, indent=2, sort_keys=False)

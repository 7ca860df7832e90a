"""Synthetic abdominal phantoms: kidney ellipsoid, tumor sphere, vein and artery tubes."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from renalparse.volgrid import ClassId, LabelMap, Volume, save_labelmap, save_volume

MIN_SHAPE = 16
SPLITS = ("train", "val", "test")


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (0.6, 0.6, 0.75)
    seed: int = 0
    noise_sigma: float = 10.0
    # mean HU for background, kidney, tumor, vein, artery
    intensities: tuple[float, float, float, float, float] = (40.0, 120.0, 90.0, 70.0, 150.0)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.intensities = tuple(float(i) for i in self.intensities)
        if len(self.shape) != 3 or len(self.spacing) != 3:
            raise ValueError("shape and spacing need three components")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if len(self.intensities) != len(ClassId):
            raise ValueError(f"need {len(ClassId)} class intensities, got {len(self.intensities)}")
        if len(set(self.intensities)) != len(self.intensities):
            raise ValueError(f"class intensities must be pairwise distinct: {self.intensities}")


class PhantomTooSmallError(ValueError):
    pass


def _segment_mask(grid, p0, p1, radius):
    """Voxels within ``radius`` of the segment p0-p1 (a capsule)."""
    d = p1 - p0
    rel = grid - p0
    t = np.clip((rel @ d) / float(d @ d), 0.0, 1.0)
    closest = p0 + t[..., None] * d
    return np.sum((grid - closest) ** 2, axis=-1) <= radius**2


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelMap]:
    """Build one (image, labels) case; fully determined by ``spec``.

    Geometry is expressed in voxel units relative to the grid size. The
    medial side of the kidney is towards x = 0, where both vessels leave it.
    """
    shape = np.array(spec.shape)
    if np.any(shape < MIN_SHAPE):
        raise PhantomTooSmallError(
            f"shape {spec.shape} too small to place all structures (need >= {MIN_SHAPE} per axis)"
        )
    rng = np.random.default_rng(spec.seed)
    n = shape.astype(float)

    center = rng.uniform([0.48, 0.42, 0.42], [0.6, 0.58, 0.58]) * n
    radii = rng.uniform([0.14, 0.14, 0.18], [0.2, 0.2, 0.25]) * n

    # tumor sits on the lateral half of the kidney surface
    direction = rng.normal(size=3)
    direction[0] = abs(direction[0]) + 0.5
    direction /= np.linalg.norm(direction)
    tumor_center = center + radii * direction
    tumor_radius = rng.uniform(0.07, 0.1) * n.min()

    vessel_dir = np.array([-1.0, *rng.uniform(-0.25, 0.25, size=2)])
    vein_radius = max(1.5, 0.045 * n.min())
    artery_radius = max(1.2, 0.035 * n.min())
    gap = vein_radius + artery_radius + max(2.0, 0.04 * n.min())
    y_shift = rng.uniform(-0.1, 0.1) * radii[1]
    hilum = center - np.array([0.7 * radii[0], 0.0, 0.0])
    vein_start = hilum + np.array([0.0, y_shift + gap / 2, 0.0])
    artery_start = hilum + np.array([0.0, y_shift - gap / 2, 0.0])

    def run_to_edge(p):
        t = (p[0] - 1.0) / -vessel_dir[0]
        return p + t * vessel_dir

    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=float) for s in spec.shape], indexing="ij"), -1)
    labels = np.zeros(spec.shape, dtype=np.uint8)

    kidney = np.sum(((grid - center) / radii) ** 2, axis=-1) <= 1.0
    labels[kidney] = ClassId.KIDNEY
    tumor = np.sum((grid - tumor_center) ** 2, axis=-1) <= tumor_radius**2
    labels[tumor] = ClassId.TUMOR
    vein = _segment_mask(grid, vein_start, run_to_edge(vein_start), vein_radius)
    labels[vein & (labels == 0)] = ClassId.VEIN
    artery = _segment_mask(grid, artery_start, run_to_edge(artery_start), artery_radius)
    labels[artery & (labels == 0)] = ClassId.ARTERY

    missing = [c.label for c in ClassId if c and not np.any(labels == c)]
    if missing:
        raise PhantomTooSmallError(f"could not place {missing} in shape {spec.shape}")

    image = np.asarray(spec.intensities, dtype=np.float64)[labels]
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return Volume(image.astype(np.float32), spec.spacing), LabelMap(labels, spec.spacing)


def split_sizes(n_cases: int, percents=(70, 15, 15)) -> tuple[int, int, int]:
    """Split sizes from cumulative boundaries ``round(n * cumulative%)`` (half to even)."""
    if sum(percents) != 100:
        raise ValueError(f"split percentages must sum to 100, got {percents}")
    cuts = [0]
    acc = 0
    for p in percents:
        acc += p
        cuts.append(round(Fraction(n_cases * acc, 100)))
    return tuple(b - a for a, b in zip(cuts, cuts[1:]))


def case_id(i: int) -> str:
    return f"case_{i:04d}"


def generate_dataset(n_cases: int, base_seed: int, spec: PhantomSpec, root, percents=(70, 15, 15)):
    """Write ``n_cases`` phantoms plus ``manifest.csv`` under ``root``; return case directories."""
    if n_cases < 1:
        raise ValueError(f"n_cases must be >= 1, got {n_cases}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    sizes = split_sizes(n_cases, percents)
    splits = [name for name, k in zip(SPLITS, sizes) for _ in range(k)]
    dirs, rows = [], []
    for i in range(n_cases):
        seed = base_seed + i
        case_spec = PhantomSpec(spec.shape, spec.spacing, seed, spec.noise_sigma, spec.intensities)
        image, labels = generate_phantom(case_spec)
        d = root / case_id(i)
        d.mkdir(exist_ok=True)
        save_volume(image, d / "image.nii.gz")
        save_labelmap(labels, d / "label.nii.gz")
        dirs.append(d)
        rows.append((case_id(i), splits[i], seed))
    with open(root / "manifest.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["case_id", "split", "seed"])
        w.writerows(rows)
    return dirs


def read_manifest(root) -> list[dict]:
    path = Path(root) / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"missing manifest: {os.fspath(path)}")
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["seed"] = int(r["seed"])
        if r["split"] not in SPLITS:
            raise ValueError(f"unknown split {r['split']!r} in {path}")
    return rows

"""Pipeline stages. Each stage reads the artifacts of the previous ones from
disk, so stages can be run one at a time from the CLI or chained by ``run_all``.

Output layout under ``output_root``::

    preprocessed/{A,B}/<case>.nii.gz   normalized images per branch
    preprocessed/labels/<case>.nii.gz  resampled label maps
    preprocessed/meta.json             target spacing, clip bounds, z-score stats
    models/{A,B}/                      best.pt, last.pt, history.csv
    predictions/{A,B}/{raw,post}/      label maps on the original grid
    predictions/ensemble/
    metrics/{A,B,ensemble}.csv, metrics/aggregate.json
    report.md, render/*.png
"""

from __future__ import annotations

import json
import logging
import os
import time
from pathlib import Path

import numpy as np

from renalparse import config as config_mod
from renalparse import fuse, nets, phantom, prep, segmetrics
from renalparse.config import PipelineConfig
from renalparse.mixtrain import train
from renalparse.render import render_overlay
from renalparse.volgrid import ClassId, load_labelmap, load_volume, save_labelmap, save_volume

log = logging.getLogger(__name__)

BRANCHES = ("A", "B")
EVAL_SETS = ("A", "B", "ensemble")


class MissingArtifactError(FileNotFoundError):
    """A stage input is absent; the message names the path and the stage that makes it."""


def require(path, producer: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing {os.fspath(path)} (run the '{producer}' stage first)")
    return path


class Layout:
    def __init__(self, cfg: PipelineConfig):
        self.data = Path(cfg.data_root)
        self.out = Path(cfg.output_root)

    def data_image(self, case):
        return self.data / case / "image.nii.gz"

    def data_label(self, case):
        return self.data / case / "label.nii.gz"

    @property
    def pre(self):
        return self.out / "preprocessed"

    def pre_image(self, branch, case):
        return self.pre / branch / f"{case}.nii.gz"

    def pre_label(self, case):
        return self.pre / "labels" / f"{case}.nii.gz"

    @property
    def pre_meta(self):
        return self.pre / "meta.json"

    def model_dir(self, branch):
        return self.out / "models" / branch

    def pred_dir(self, name, kind=None):
        d = self.out / "predictions" / name
        return d / kind if kind else d

    @property
    def metrics(self):
        return self.out / "metrics"

    @property
    def report(self):
        return self.out / "report.md"

    @property
    def render(self):
        return self.out / "render"


def snapshot(cfg: PipelineConfig, out_dir) -> None:
    """Write the effective configuration next to a stage's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_mod.save(cfg, out_dir / "config.effective.yaml")


def cases_by_split(cfg: PipelineConfig) -> dict[str, list[str]]:
    rows = phantom.read_manifest(require(Layout(cfg).data / "manifest.csv", "phantom").parent)
    out = {s: [] for s in phantom.SPLITS}
    for r in rows:
        out[r["split"]].append(r["case_id"])
    return out


# ---------------------------------------------------------------- stages


def stage_phantom(cfg: PipelineConfig) -> list[Path]:
    lay = Layout(cfg)
    dirs = phantom.generate_dataset(cfg.n_cases, cfg.seed, cfg.phantom, lay.data, cfg.split_percents)
    snapshot(cfg, lay.data)
    log.info("wrote %d phantoms to %s", len(dirs), lay.data)
    return dirs


def fit_branch_a(train_cases, clip: prep.ClipSpec):
    """Clip bounds from the pooled training foreground, then z-score stats of the clipped foreground."""
    fg = [np.asarray(v.data, dtype=np.float64)[m.data != 0] for v, m in train_cases]
    if sum(f.size for f in fg) == 0:
        raise prep.NoForegroundError("no foreground voxels in the training split")
    lo, hi = prep.percentile_bounds(np.concatenate(fg), clip)
    stats = prep.compute_foreground_stats([(prep.clip_to_bounds(v, lo, hi), m) for v, m in train_cases])
    return lo, hi, stats


def normalize_branch_a(v, lo, hi, stats):
    return prep.zscore(prep.clip_to_bounds(v, lo, hi), stats)


def normalize_branch_b(v, a_min, a_max):
    return prep.normalize_channel(prep.scale_intensity_range(v, a_min, a_max))


def stage_preprocess(cfg: PipelineConfig) -> dict:
    lay = Layout(cfg)
    splits = cases_by_split(cfg)
    if not splits["train"]:
        raise ValueError("training split is empty; increase n_cases")
    cases = [c for s in phantom.SPLITS for c in splits[s]]
    raw = {c: (load_volume(require(lay.data_image(c), "phantom")), load_labelmap(require(lay.data_label(c), "phantom"))) for c in cases}

    if cfg.target_spacing is not None:
        target = tuple(float(s) for s in cfg.target_spacing)
    else:
        target = tuple(float(s) for s in np.median([raw[c][0].spacing for c in splits["train"]], axis=0))
    res = {c: (prep.resample(v, target), prep.resample(m, target)) for c, (v, m) in raw.items()}

    lo, hi, stats = fit_branch_a([res[c] for c in splits["train"]], cfg.clip)
    a_min, a_max = cfg.branch_b_range
    for c, (v, m) in res.items():
        save_volume(normalize_branch_a(v, lo, hi, stats), _mkparent(lay.pre_image("A", c)))
        save_volume(normalize_branch_b(v, a_min, a_max), _mkparent(lay.pre_image("B", c)))
        save_labelmap(m, _mkparent(lay.pre_label(c)))
    meta = {
        "target_spacing": list(target),
        "clip_bounds": [lo, hi],
        "zscore": {"mean": stats.mean, "std": stats.std},
        "branch_b_range": [a_min, a_max],
        "original": {c: {"shape": list(v.shape), "spacing": list(v.spacing)} for c, (v, _) in raw.items()},
    }
    with open(lay.pre_meta, "w") as f:
        json.dump(meta, f, indent=2)
    stats.save(lay.pre / "norm_stats.json")
    snapshot(cfg, lay.pre)
    log.info("preprocessed %d cases at spacing %s (clip %.3f..%.3f)", len(cases), target, lo, hi)
    return meta


def _mkparent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_pre(cfg, branch, case_ids):
    lay = Layout(cfg)
    out = []
    for c in case_ids:
        v = load_volume(require(lay.pre_image(branch, c), "preprocess"))
        m = load_labelmap(require(lay.pre_label(c), "preprocess"))
        out.append((v.data, m.data))
    return out


def stage_train(cfg: PipelineConfig, branch: str):
    b = cfg.branch(branch)
    lay = Layout(cfg)
    splits = cases_by_split(cfg)
    train_cases = _load_pre(cfg, branch, splits["train"])
    val_cases = _load_pre(cfg, branch, splits["val"])
    net = nets.build(b.net, b.seed)
    log.info(
        "branch %s: %s (%d params), %s lr=%g, %d epochs x %d steps, mixup %s, augmentation %s",
        branch, b.net.arch, nets.count_parameters(net), b.train.optimizer, b.train.lr,
        b.train.epochs, b.train.steps_per_epoch,
        f"alpha={b.mixup.alpha:g}" if b.mixup.enabled else "off", "on" if b.train.augment else "off",
    )
    out_dir = lay.model_dir(branch)
    snapshot(cfg, out_dir)
    t0 = time.perf_counter()
    result = train(
        net, train_cases, b.train, b.mixup, val_cases or None,
        cfg.augment if b.train.augment else None, out_dir, meta={"branch": branch},
    )
    log.info("branch %s trained in %.1fs (best val dice %s)", branch, time.perf_counter() - t0, result.best_val_dice)
    return result


def stage_predict(cfg: PipelineConfig, branches=BRANCHES) -> None:
    lay = Layout(cfg)
    meta = _read_json(require(lay.pre_meta, "preprocess"))
    target = tuple(meta["target_spacing"])
    test = cases_by_split(cfg)["test"]
    for branch in branches:
        net, _ = nets.load_checkpoint(require(lay.model_dir(branch) / "best.pt", f"train --branch {branch}"))
        out_dir = lay.pred_dir(branch, "raw")
        out_dir.mkdir(parents=True, exist_ok=True)
        for c in test:
            image = load_volume(require(lay.pre_image(branch, c), "preprocess"))
            pred = fuse.predict_labels(net, image.data, target)
            orig = meta["original"][c]
            pred = prep.resample_labels_to(pred, orig["spacing"], orig["shape"])
            save_labelmap(pred, out_dir / f"{c}.nii.gz")
        snapshot(cfg, lay.pred_dir(branch))
        log.info("branch %s: predicted %d test cases", branch, len(test))


def stage_postprocess(cfg: PipelineConfig) -> None:
    """Per-model filtering (no-op copy when filtering happens after the merge)."""
    lay = Layout(cfg)
    test = cases_by_split(cfg)["test"]
    per_model = cfg.postprocess.stage == "per_model"
    for branch in BRANCHES:
        out_dir = lay.pred_dir(branch, "post")
        out_dir.mkdir(parents=True, exist_ok=True)
        for c in test:
            m = load_labelmap(require(lay.pred_dir(branch, "raw") / f"{c}.nii.gz", "predict"))
            save_labelmap(fuse.postprocess(m, cfg.postprocess) if per_model else m, out_dir / f"{c}.nii.gz")


def stage_ensemble(cfg: PipelineConfig) -> None:
    lay = Layout(cfg)
    test = cases_by_split(cfg)["test"]
    out_dir = lay.pred_dir("ensemble")
    out_dir.mkdir(parents=True, exist_ok=True)
    for c in test:
        a, b = (load_labelmap(require(lay.pred_dir(x, "post") / f"{c}.nii.gz", "postprocess")) for x in BRANCHES)
        merged = fuse.ensemble_merge(a, b, cfg.ensemble)
        if cfg.postprocess.stage == "post_merge":
            merged = fuse.postprocess(merged, cfg.postprocess)
        save_labelmap(merged, out_dir / f"{c}.nii.gz")
    snapshot(cfg, out_dir)


def evaluate_dirs(pred_files: dict, gt_files: dict) -> list[segmetrics.MetricsRecord]:
    missing = sorted(set(gt_files) - set(pred_files))
    if missing:
        raise MissingArtifactError(f"no prediction for cases {missing}")
    return [segmetrics.evaluate_case(load_labelmap(pred_files[c]), load_labelmap(gt_files[c]), c) for c in sorted(gt_files)]


def label_files(directory) -> dict[str, Path]:
    """``<case>.nii.gz`` files, or ``<case>/label.nii.gz`` subdirectories."""
    d = require(directory, "predict")
    flat = {p.name[: -len(".nii.gz")]: p for p in sorted(d.glob("*.nii.gz"))}
    nested = {p.parent.name: p for p in sorted(d.glob("*/label.nii.gz"))}
    return flat or nested


def stage_evaluate(cfg: PipelineConfig) -> dict:
    lay = Layout(cfg)
    test = cases_by_split(cfg)["test"]
    gt = {c: require(lay.data_label(c), "phantom") for c in test}
    lay.metrics.mkdir(parents=True, exist_ok=True)
    aggs = {}
    for name in EVAL_SETS:
        d = lay.pred_dir(name) if name == "ensemble" else lay.pred_dir(name, "post")
        producer = "ensemble" if name == "ensemble" else "postprocess"
        preds = {c: require(d / f"{c}.nii.gz", producer) for c in test}
        records = evaluate_dirs(preds, gt)
        segmetrics.write_case_csv(records, lay.metrics / f"{name}.csv")
        aggs[name] = segmetrics.aggregate(records)
    segmetrics.write_aggregate_json(aggs, lay.metrics / "aggregate.json")
    snapshot(cfg, lay.metrics)
    for name in EVAL_SETS:
        cls = aggs[name]["classes"]
        log.info("%s: " + ", ".join(f"{k} {cls[k]['dsc']:.3f}" if cls[k]["dsc"] is not None else f"{k} -" for k in cls), name)
    return aggs


def stage_report(cfg: PipelineConfig) -> Path:
    lay = Layout(cfg)
    aggs = _read_json(require(lay.metrics / "aggregate.json", "evaluate"))
    titles = {"A": "Branch A (3D U-Net + manifold mixup)", "B": "Branch B (SegResNet + VAE)", "ensemble": "Class-wise ensemble"}
    parts = ["# renalparse report", ""]
    parts.append(f"Test cases: {aggs['ensemble']['n_cases']}. DSC is a fraction; HD and AHD are in mm.")
    parts.append("Mean over cases; cases where a distance is undefined (empty mask) are excluded and counted.")
    parts.append("")
    for name in EVAL_SETS:
        parts += [segmetrics.format_table(aggs[name], titles[name]), ""]
    parts += ["## Training", ""]
    for branch in BRANCHES:
        hist = lay.model_dir(branch) / "history.csv"
        if not hist.exists():
            continue
        rows = hist.read_text().strip().splitlines()[1:]
        if rows:
            epoch, loss, vd = rows[-1].split(",")
            parts.append(f"- branch {branch}: {len(rows)} epochs, final train loss {float(loss):.4f}"
                         + (f", final val dice {float(vd):.4f}" if vd else ""))
    lay.report.write_text("\n".join(parts) + "\n")
    return lay.report


def stage_render(cfg: PipelineConfig, case: str | None = None, source: str = "ensemble", axis: int = 2,
                 slice_index: int | None = None, out=None) -> Path:
    """Overlay of one test case; the default slice has the largest ground-truth tumor area."""
    lay = Layout(cfg)
    test = cases_by_split(cfg)["test"]
    case = case or (test[0] if test else None)
    if case is None:
        raise ValueError("no test cases to render")
    image = load_volume(require(lay.data_image(case), "phantom"))
    if source == "gt":
        labels = load_labelmap(require(lay.data_label(case), "phantom"))
    else:
        d = lay.pred_dir(source) if source == "ensemble" else lay.pred_dir(source, "post")
        labels = load_labelmap(require(d / f"{case}.nii.gz", "ensemble" if source == "ensemble" else "postprocess"))
    if slice_index is None:
        gt = load_labelmap(require(lay.data_label(case), "phantom")).data
        area = (gt == ClassId.TUMOR).sum(axis=tuple(a for a in range(3) if a != axis))
        if not area.any():
            area = (gt != 0).sum(axis=tuple(a for a in range(3) if a != axis))
        slice_index = int(np.argmax(area))
    out = Path(out) if out else lay.render / f"{case}_{source}_ax{axis}_{slice_index}.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    render_overlay(image, labels, axis, slice_index, out)
    return out


def run_all(cfg: PipelineConfig) -> dict:
    t0 = time.perf_counter()
    stage_phantom(cfg)
    stage_preprocess(cfg)
    for branch in BRANCHES:
        stage_train(cfg, branch)
    stage_predict(cfg)
    stage_postprocess(cfg)
    stage_ensemble(cfg)
    aggs = stage_evaluate(cfg)
    stage_report(cfg)
    for source in ("gt", "ensemble"):
        stage_render(cfg, source=source)
    snapshot(cfg, Layout(cfg).out)
    log.info("run-all finished in %.1fs", time.perf_counter() - t0)
    return aggs


def _read_json(path):
    with open(path) as f:
        return json.load(f)

"""Dice + cross-entropy loss, manifold mixup and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from renalparse import fuse, segmetrics
from renalparse.nets import NetOutput, mix_hidden, save_checkpoint, vae_penalty
from renalparse.prep import AugmentConfig, augment
from renalparse.volgrid import FOREGROUND, LabelMap, Volume, crop_or_pad_array

log = logging.getLogger(__name__)

DICE_EPS = 1e-5
OPTIMIZERS = ("sgd", "adamw")


def dice_ce_components(logits: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS):
    """Return ``(cross_entropy, dice_loss)``.

    Dice is computed per class over batch and space together and averaged
    over all classes (background included).
    """
    n_classes = logits.shape[1]
    if logits.ndim != 5 or target.shape != (logits.shape[0], *logits.shape[2:]):
        raise ValueError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} inconsistent")
    target = target.long()
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= n_classes):
        raise ValueError(f"target values outside 0..{n_classes - 1}")
    ce = F.cross_entropy(logits, target)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target, n_classes).movedim(-1, 1).to(probs.dtype)
    dims = (0, 2, 3, 4)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = (2.0 * inter + eps) / (denom + eps)
    return ce, 1.0 - dice.mean()


def dice_ce_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Cross-entropy plus soft Dice loss, both weighted 1."""
    ce, dice = dice_ce_components(logits, target, eps)
    return ce + dice


@dataclass
class MixupConfig:
    alpha: float = 0.1
    eligible_points: tuple[int, ...] = (0, 1, 2)
    enabled: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        self.eligible_points = tuple(sorted(int(k) for k in self.eligible_points))
        if not self.eligible_points or min(self.eligible_points) < 0:
            raise ValueError(f"eligible points must be a nonempty set of indices >= 0")

    def check_against(self, net) -> None:
        extra = set(self.eligible_points) - set(net.mixing_points)
        if extra:
            raise ValueError(f"mixing points {sorted(extra)} not exposed by the network {net.mixing_points}")


@dataclass(frozen=True)
class MixupDraw:
    lam: float
    k: int
    pairing: tuple[int, ...]

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


def draw_mixup(cfg: MixupConfig, rng: np.random.Generator, batch_size: int = 2) -> MixupDraw:
    """lambda ~ Beta(alpha, alpha), k uniform over eligible points, and a batch pairing.

    The pairing reverses a batch of two and is a uniform random permutation otherwise.
    """
    if not cfg.enabled:
        raise ValueError("mixup is disabled in this config")
    if batch_size < 2:
        raise ValueError("mixup needs a batch of at least 2 to pair samples")
    lam = float(rng.beta(cfg.alpha, cfg.alpha))
    k = int(cfg.eligible_points[rng.integers(len(cfg.eligible_points))])
    if batch_size == 2:
        pairing = (1, 0)
    else:
        pairing = tuple(int(i) for i in rng.permutation(batch_size))
    return MixupDraw(lam, k, pairing)


@dataclass
class Batch:
    images: torch.Tensor  # (B, 1, X, Y, Z)
    labels: torch.Tensor  # (B, X, Y, Z)

    def __post_init__(self):
        if self.images.ndim != 5 or self.labels.ndim != 4:
            raise ValueError("images must be (B, 1, X, Y, Z) and labels (B, X, Y, Z)")
        if self.images.shape[0] < 1 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels need the same nonzero batch size")
        if self.images.shape[2:] != self.labels.shape[1:]:
            raise ValueError("images and labels differ spatially")

    def __len__(self):
        return self.images.shape[0]


def _vae_term(net, out: NetOutput, target: torch.Tensor) -> torch.Tensor | None:
    if out.recon is None:
        return None
    return net.cfg.vae_weight * vae_penalty(out, target)


def plain_step(net, batch: Batch) -> torch.Tensor:
    out = net(batch.images)
    loss = dice_ce_loss(out.logits, batch.labels)
    extra = _vae_term(net, out, batch.images)
    return loss if extra is None else loss + extra


def mixup_step(net, batch: Batch, draw: MixupDraw) -> torch.Tensor:
    """Mix hidden states at point ``k`` and mix the two losses with the same lambda."""
    if len(batch) < 2:
        raise ValueError("mixup needs a batch of at least 2 to pair samples")
    if len(draw.pairing) != len(batch):
        raise ValueError(f"pairing of length {len(draw.pairing)} for batch of {len(batch)}")
    idx = torch.as_tensor(draw.pairing, dtype=torch.long)
    hidden = net.forward_to(batch.images, draw.k)
    out = net.forward_from(mix_hidden(hidden, draw.lam, draw.pairing), draw.k)
    loss = draw.lam * dice_ce_loss(out.logits, batch.labels) + (1.0 - draw.lam) * dice_ce_loss(
        out.logits, batch.labels[idx]
    )
    mixed_input = draw.lam * batch.images + (1.0 - draw.lam) * batch.images[idx]
    extra = _vae_term(net, out, mixed_input)
    return loss if extra is None else loss + extra


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    lr: float = 0.01
    epochs: int = 50
    batch_size: int = 2
    loss: str = "dice+ce"
    seed: int = 0
    steps_per_epoch: int = 20
    momentum: float = 0.99
    nesterov: bool = True
    weight_decay: float = 0.0
    patch_size: tuple[int, int, int] | None = (32, 32, 32)
    foreground_oversample: float = 0.33
    augment: bool = False

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must be >= 1")
        if self.loss != "dice+ce":
            raise ValueError(f"only the 'dice+ce' loss is supported, got {self.loss!r}")
        if self.patch_size is not None:
            self.patch_size = tuple(int(p) for p in self.patch_size)
        if not 0.0 <= self.foreground_oversample <= 1.0:
            raise ValueError("foreground_oversample must be in [0, 1]")


# Settings reported for the full-scale runs; desk-scale defaults differ in epochs.
FULL_SCALE_PRESETS = {
    "unet3d": TrainConfig(optimizer="sgd", lr=0.01, epochs=1000, batch_size=2),
    "segresnet": TrainConfig(optimizer="adamw", lr=1e-4, epochs=4000, batch_size=2, augment=True),
}


def make_optimizer(net, tcfg: TrainConfig) -> torch.optim.Optimizer:
    if tcfg.optimizer == "sgd":
        return torch.optim.SGD(
            net.parameters(),
            lr=tcfg.lr,
            momentum=tcfg.momentum,
            nesterov=tcfg.nesterov and tcfg.momentum > 0,
            weight_decay=tcfg.weight_decay,
        )
    return torch.optim.AdamW(net.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)


def stream(*keys: int) -> np.random.Generator:
    """Independent RNG stream addressed by integer keys (seed, epoch, step, slot, ...)."""
    return np.random.default_rng([int(k) for k in keys])


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("RENALPARSE_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def _sample_patch(image, labels, patch, oversample, rng):
    if patch is None:
        return image, labels
    shape = np.array(image.shape)
    patch = np.array(patch)
    if rng.random() < oversample and np.any(labels):
        fg = np.flatnonzero(labels)
        center = np.array(np.unravel_index(fg[rng.integers(len(fg))], labels.shape))
        start = center - patch // 2
    else:
        start = np.array([rng.integers(0, max(n - p, 0) + 1) for n, p in zip(shape, patch)])
    start = np.clip(start, 0, np.maximum(shape - patch, 0))
    sl = tuple(slice(s, s + p) for s, p in zip(start, patch))
    img, lab = image[sl], labels[sl]
    if img.shape != tuple(patch):
        img = crop_or_pad_array(img, patch, float(image.min()))
        lab = crop_or_pad_array(lab, patch, 0)
    return img, lab


def make_sample(cases, tcfg, aug_cfg, keys):
    rng = stream(*keys)
    image, labels = cases[rng.integers(len(cases))]
    img, lab = _sample_patch(image, labels, tcfg.patch_size, tcfg.foreground_oversample, rng)
    if aug_cfg is not None and tcfg.augment:
        v, m = augment(Volume(img), LabelMap(lab), aug_cfg, rng)
        img, lab = v.data, m.data
    return np.asarray(img, dtype=np.float32), np.asarray(lab, dtype=np.int64)


def make_batch(cases, tcfg: TrainConfig, aug_cfg, epoch: int, step: int, pool=None) -> Batch:
    """Assemble one batch; every slot draws from its own (seed, epoch, step, slot) stream."""
    keys = [(tcfg.seed, epoch, step, slot) for slot in range(tcfg.batch_size)]
    fn = lambda k: make_sample(cases, tcfg, aug_cfg, k)
    samples = list(pool.map(fn, keys)) if pool is not None else [fn(k) for k in keys]
    images = torch.from_numpy(np.stack([s[0] for s in samples]))[:, None]
    labels = torch.from_numpy(np.stack([s[1] for s in samples]))
    return Batch(images, labels)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainResult:
    history: list[tuple[int, float, float | None]] = field(default_factory=list)
    best_val_dice: float | None = None
    best_epoch: int | None = None
    checkpoints: dict = field(default_factory=dict)


def validation_dice(net, cases) -> float:
    """Mean foreground DSC of full-volume argmax predictions."""
    scores = []
    for image, labels in cases:
        pred = fuse.predict_labels(net, image).data
        scores.extend(segmetrics.dsc(pred == c, labels == c) for c in FOREGROUND)
    return float(np.mean(scores))


def write_history(history, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_dice"])
        for epoch, loss, vd in history:
            w.writerow([epoch, repr(loss), "" if vd is None else repr(vd)])


def train(
    net,
    train_cases,
    tcfg: TrainConfig,
    mcfg: MixupConfig | None = None,
    val_cases=None,
    aug_cfg: AugmentConfig | None = None,
    out_dir=None,
    meta: dict | None = None,
) -> TrainResult:
    """Train ``net`` in place for ``epochs * steps_per_epoch`` optimizer steps.

    ``train_cases``/``val_cases`` are sequences of (normalized image, labels)
    numpy arrays. With ``out_dir`` set, writes ``last.pt``, ``best.pt`` (best
    validation Dice, or the last epoch without validation data) and
    ``history.csv``.
    """
    if not train_cases:
        raise ValueError("training split is empty")
    mcfg = mcfg or MixupConfig(enabled=False)
    if mcfg.enabled:
        mcfg.check_against(net)
        if tcfg.batch_size < 2:
            raise ValueError("mixup needs batch_size >= 2")
        log.info("mixup enabled: alpha=%g, eligible points %s", mcfg.alpha, list(mcfg.eligible_points))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    opt = make_optimizer(net, tcfg)
    result = TrainResult()
    workers = num_workers()
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    meta = dict(meta or {})
    meta.update(train_config=asdict(tcfg), mixup_config=asdict(mcfg))
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(tcfg.seed)
            for epoch in range(tcfg.epochs):
                net.train()
                losses = []
                for step in range(tcfg.steps_per_epoch):
                    batch = make_batch(train_cases, tcfg, aug_cfg, epoch, step, pool)
                    opt.zero_grad(set_to_none=True)
                    if mcfg.enabled:
                        draw = draw_mixup(mcfg, stream(tcfg.seed, epoch, step, 1 << 20), len(batch))
                        loss = mixup_step(net, batch, draw)
                    else:
                        loss = plain_step(net, batch)
                    if not torch.isfinite(loss):
                        raise TrainingDivergedError(f"non-finite loss at epoch {epoch} step {step}")
                    loss.backward()
                    opt.step()
                    losses.append(float(loss.detach()))
                mean_loss = float(np.mean(losses))
                vd = validation_dice(net, val_cases) if val_cases else None
                result.history.append((epoch, mean_loss, vd))
                log.info("epoch %d loss %.4f val_dice %s", epoch, mean_loss, "-" if vd is None else f"{vd:.4f}")
                improved = vd is not None and (result.best_val_dice is None or vd > result.best_val_dice)
                if improved:
                    result.best_val_dice, result.best_epoch = vd, epoch
                if out_dir is not None and (improved or (vd is None and epoch == tcfg.epochs - 1)):
                    save_checkpoint(out_dir / "best.pt", net, {**meta, "epoch": epoch, "val_dice": vd})
                    result.checkpoints["best"] = out_dir / "best.pt"
    finally:
        if pool is not None:
            pool.shutdown()
    if out_dir is not None:
        save_checkpoint(out_dir / "last.pt", net, {**meta, "epoch": tcfg.epochs - 1})
        result.checkpoints["last"] = out_dir / "last.pt"
        write_history(result.history, out_dir / "history.csv")
    return result

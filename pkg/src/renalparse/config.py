"""Pipeline configuration: one YAML file drives every stage.

Top-level keys::

    data_root, output_root, seed, n_cases, split_percents,
    phantom, clip, target_spacing, branch_b_range, augment,
    branch_a {net, train, mixup, seed}, branch_b {...},
    ensemble, postprocess

Phantom case ``i`` is seeded with ``seed + i``. A ``null`` branch seed is
derived from the global one: branch A ``seed + 1``, branch B ``seed + 2``.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field

import yaml

from renalparse.fuse import EnsembleSpec, PostprocessSpec
from renalparse.mixtrain import MixupConfig, TrainConfig
from renalparse.nets import NetConfig
from renalparse.phantom import PhantomSpec
from renalparse.prep import AugmentConfig, ClipSpec

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class BranchConfig:
    net: NetConfig
    train: TrainConfig
    mixup: MixupConfig
    seed: int | None = None


# Desk-scale learning rates: 1000 steps on 32^3 patches is far shorter than the
# reported full-scale schedules (see mixtrain.FULL_SCALE_PRESETS for those), so both
# branches start from a higher rate with the same optimizer family.


def default_branch_a() -> BranchConfig:
    return BranchConfig(
        net=NetConfig(arch="unet3d", base_channels=8, depth=3),
        train=TrainConfig(optimizer="sgd", lr=0.03, momentum=0.99, nesterov=True, epochs=50, steps_per_epoch=20),
        mixup=MixupConfig(alpha=0.1, eligible_points=(0, 1, 2), enabled=True),
    )


def default_branch_b() -> BranchConfig:
    return BranchConfig(
        net=NetConfig(arch="segresnet", base_channels=8, depth=3, vae_branch=True, vae_weight=0.1),
        train=TrainConfig(optimizer="adamw", lr=3e-3, weight_decay=1e-5, epochs=50, steps_per_epoch=20, augment=True),
        mixup=MixupConfig(enabled=False),
    )


@dataclass
class PipelineConfig:
    data_root: str = "runs/data"
    output_root: str = "runs/out"
    seed: int = 0
    n_cases: int = 10
    split_percents: tuple[int, int, int] = (70, 15, 15)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    clip: ClipSpec = field(default_factory=ClipSpec)
    target_spacing: tuple[float, float, float] | None = None  # null: median training spacing
    branch_b_range: tuple[float, float] = (-100.0, 300.0)  # HU window scaled onto [0, 1]
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    branch_a: BranchConfig = field(default_factory=default_branch_a)
    branch_b: BranchConfig = field(default_factory=default_branch_b)
    ensemble: EnsembleSpec = field(default_factory=EnsembleSpec)
    postprocess: PostprocessSpec = field(default_factory=PostprocessSpec)

    def __post_init__(self):
        if self.n_cases < 1:
            raise ConfigError("n_cases must be >= 1")
        if len(self.split_percents) != 3 or sum(self.split_percents) != 100:
            raise ConfigError(f"split_percents must be three values summing to 100, got {self.split_percents}")
        if self.branch_b_range[1] <= self.branch_b_range[0]:
            raise ConfigError(f"branch_b_range must be increasing, got {self.branch_b_range}")
        if self.branch_a.net.arch != "unet3d" or self.branch_b.net.arch != "segresnet":
            raise ConfigError("branch A must be unet3d and branch B segresnet")

    def branch(self, name: str) -> BranchConfig:
        if name not in ("A", "B"):
            raise ConfigError(f"unknown branch {name!r}; expected A or B")
        return self.branch_a if name == "A" else self.branch_b

    def resolved(self) -> "PipelineConfig":
        """Copy with derived seeds filled in."""
        cfg = copy.deepcopy(self)
        cfg.phantom.seed = cfg.seed
        for offset, b in ((1, cfg.branch_a), (2, cfg.branch_b)):
            if b.seed is None:
                b.seed = cfg.seed + offset
            b.train.seed = b.seed
        return cfg

    def to_dict(self) -> dict:
        d = _plain(dataclasses.asdict(self))
        del d["phantom"]["seed"]  # phantoms are seeded from the global seed
        return d


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _branch(data, default: BranchConfig, where) -> BranchConfig:
    data = dict(data or {})
    unknown = sorted(set(data) - {"net", "train", "mixup", "seed"})
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    base = dataclasses.asdict(default)
    parts = {}
    for key, cls in (("net", NetConfig), ("train", TrainConfig), ("mixup", MixupConfig)):
        merged = {**base[key], **(data.get(key) or {})}
        parts[key] = _build(cls, merged, f"{where}.{key}")
    return BranchConfig(**parts, seed=data.get("seed"))


def from_dict(data: dict | None) -> PipelineConfig:
    data = dict(data or {})
    data.pop("schema_version", None)
    fields = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = sorted(set(data) - fields)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    kw = {}
    for key in ("data_root", "output_root", "seed", "n_cases", "split_percents", "target_spacing", "branch_b_range"):
        if key in data:
            kw[key] = data[key]
    for key in ("split_percents", "branch_b_range", "target_spacing"):
        if kw.get(key) is not None:
            kw[key] = tuple(kw[key])
    if "phantom" in data:
        ph = dict(data["phantom"] or {})
        if "seed" in ph:
            raise ConfigError("phantom: unknown keys ['seed'] (phantoms use the global seed)")
        kw["phantom"] = _build(PhantomSpec, {**dataclasses.asdict(PhantomSpec()), **ph}, "phantom")
    for key, cls in (("clip", ClipSpec), ("augment", AugmentConfig), ("ensemble", EnsembleSpec), ("postprocess", PostprocessSpec)):
        if key in data:
            kw[key] = _build(cls, data[key], key)
    if "branch_a" in data:
        kw["branch_a"] = _branch(data["branch_a"], default_branch_a(), "branch_a")
    if "branch_b" in data:
        kw["branch_b"] = _branch(data["branch_b"], default_branch_b(), "branch_b")
    try:
        return PipelineConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def dump(cfg: PipelineConfig) -> str:
    body = {"schema_version": SCHEMA_VERSION, **cfg.to_dict()}
    return yaml.safe_dump(body, sort_keys=False, default_flow_style=None)


def save(cfg: PipelineConfig, path) -> None:
    with open(path, "w") as f:
        f.write("# renalparse pipeline configuration (see renalparse.config for the schema)\n")
        f.write(dump(cfg))


def load(path) -> PipelineConfig:
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    version = (data or {}).get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema_version {version}")
    return from_dict(data)

"""Run configuration: nested dataclasses loaded from one YAML or JSON file.

Every section is validated before any compute; unknown keys anywhere are an
error rather than being silently ignored.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .degradation import DegradationConfig, StageRanges
from .losses import LossWeights
from .student import StudentConfig
from .teacher import TeacherConfig

ABLATIONS_TEACHER = ("no-mem", "no-early", "no-late", "no-ssr", "no-mtm")
ABLATIONS_STUDENT = ("no-nk", "no-app", "no-disc")


class ConfigError(ValueError):
    pass


def cache_dir() -> Path | None:
    """Provider model cache root from ``SUPERFACE_CACHE``; None disables caching."""
    root = os.environ.get("SUPERFACE_CACHE")
    return Path(root) if root else None


@dataclass
class OptimConfig:
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0 or len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("optimizer needs lr > 0 and two betas in [0, 1)")


@dataclass
class DataConfig:
    root: str = "data/toy"
    batch_size: int = 8
    workers: int = 2
    queue_size: int = 4
    identities: list | None = None  # restrict to these identity names

    def __post_init__(self):
        if self.batch_size < 1 or self.workers < 0 or self.queue_size < 1:
            raise ConfigError("batch_size >= 1, workers >= 0, queue_size >= 1 required")


@dataclass
class TeacherTrainConfig:
    iterations: int = 500
    checkpoint_every: int = 100
    mask_prob: float = 0.5
    keypoint_threshold: float = 0.1
    landmarker_steps: int = 1500
    audio2lip_steps: int = 600
    ablate: list = field(default_factory=list)

    def __post_init__(self):
        if self.iterations < 1 or self.checkpoint_every < 1:
            raise ConfigError("iterations and checkpoint_every must be positive")
        if not 0 <= self.mask_prob <= 1:
            raise ConfigError("mask_prob must lie in [0, 1]")
        bad = set(self.ablate) - set(ABLATIONS_TEACHER)
        if bad:
            raise ConfigError(f"unknown teacher ablation(s) {sorted(bad)}")


@dataclass
class DistillConfig:
    steps: int = 2000
    head_steps: int = 400
    frames_per_identity: int | None = None  # None: every usable driving frame
    identities: list | None = None
    ablate: list = field(default_factory=list)
    disc_mode: str = "finetune"  # finetune | frozen
    target: str = "teacher"  # teacher | real (real = scratch baseline)
    lr: float = 1e-3

    def __post_init__(self):
        bad = set(self.ablate) - set(ABLATIONS_STUDENT)
        if bad:
            raise ConfigError(f"unknown student ablation(s) {sorted(bad)}")
        if self.disc_mode not in ("frozen", "finetune"):
            raise ConfigError("disc_mode must be 'frozen' or 'finetune'")
        if self.target not in ("teacher", "real"):
            raise ConfigError("target must be 'teacher' or 'real'")
        if self.steps < 1 or self.head_steps < 0:
            raise ConfigError("steps must be positive")


@dataclass
class EvalConfig:
    split: str = "test"
    max_frames: int | None = None


@dataclass
class RunConfig:
    seed: int = 0
    resolution: int = 64
    deterministic: bool = False
    out_dir: str = "runs/default"
    model: dict = field(default_factory=dict)  # TeacherConfig overrides
    student: dict = field(default_factory=dict)  # StudentConfig overrides
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TeacherTrainConfig = field(default_factory=TeacherTrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        _check_keys(self.model, TeacherConfig, "model", exclude=("resolution",))
        _check_keys(self.student, StudentConfig, "student",
                    exclude=("resolution", "k", "app_channels", "feat_size", "teacher_depth"))
        try:
            self.teacher_config()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"model: {e}") from e

    def teacher_config(self) -> TeacherConfig:
        kw = dict(self.model)
        ab = set(self.train.ablate)
        if "no-mem" in ab or "no-early" in ab:
            kw["early_infusion"] = False
        if "no-mem" in ab or "no-late" in ab:
            kw["late_infusion"] = False
        if "no-mtm" in ab:
            kw["local_region"] = None
        return TeacherConfig(resolution=self.resolution, **kw)

    def student_config(self, identities=()) -> StudentConfig:
        return StudentConfig.for_teacher(self.teacher_config(), identities=tuple(identities),
                                         **self.student)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _check_keys(d: dict, cls, where: str, exclude=()):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    bad = set(d) - names
    if bad:
        raise ConfigError(f"{where}: unknown key(s) {sorted(bad)}")


def _build(cls, d, where: str):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    _check_keys(d, cls, where)
    hints = typing.get_type_hints(cls)
    kw = {}
    for name, value in d.items():
        t = hints.get(name)
        if dataclasses.is_dataclass(t):
            if not isinstance(value, (dict, type(None))):
                raise ConfigError(f"{where}.{name}: expected a mapping, got {type(value).__name__}")
            value = _build(t, value, f"{where}.{name}")
        elif cls is DegradationConfig and name == "stages":
            if not isinstance(value, list) or not value:
                raise ConfigError(f"{where}.stages: expected a non-empty list")
            value = [_build(StageRanges, s, f"{where}.stages[{i}]") for i, s in enumerate(value)]
        kw[name] = value
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def from_dict(d: dict | None) -> RunConfig:
    return _build(RunConfig, d or {}, "config")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        d = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    return from_dict(d)


def dump_config(cfg: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(json.loads(json.dumps(cfg.to_dict(), default=list)),
                                         sort_keys=False))

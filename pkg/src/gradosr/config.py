"""Experiment configuration: nested dataclasses loaded from YAML/JSON."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .classifier import ClassifierHyper
from .detector import DetectorHyper
from .gradients import GradientConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str | None = None
    num_classes: int = 10
    train_per_class: int = 200
    test_per_class: int = 100
    image_size: int = 16
    channels: int = 3
    noise: float = 0.15
    mean_grid: int = 4
    mean_spread: float = 0.35
    data_seed: int = 0
    outlier_source: str | None = None
    outlier_path: str | None = None
    outlier_count: int | None = None
    # None: every test sample for identification, 1:1 for classification.
    testbed_ratio: list[int] | None = None


@dataclass
class SplitConfig:
    num_known: int = 6
    num_inner_known: int = 4


@dataclass
class ClassifierConfig:
    architecture: str = "small_cnn"
    hidden: list[int] = field(default_factory=lambda: [64])
    epochs: int = 5
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    step_size: int = 30
    gamma: float = 0.1

    def hyper(self, seed: int) -> ClassifierHyper:
        d = dataclasses.asdict(self)
        del d["architecture"], d["hidden"]
        return ClassifierHyper(seed=seed, **d)


@dataclass
class DetectorConfig:
    hidden: int = 64
    epochs: int = 60
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 128
    val_fraction: float = 0.1
    log_transform: bool = True
    # "exclude": drop parameter sets whose shapes differ between the inner and
    # full classifiers; "keep": match parameter sets by name only.
    head_policy: str = "exclude"

    def hyper(self, seed: int) -> DetectorHyper:
        d = dataclasses.asdict(self)
        del d["head_policy"]
        return DetectorHyper(seed=seed, **d)


@dataclass
class EvalConfig:
    tau: float | None = None
    baselines: list[str] = field(default_factory=list)
    plot_dims: list[int] | None = None


@dataclass
class ExperimentConfig:
    mode: str = "identification"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    gradients: GradientConfig = field(default_factory=GradientConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("identification", "classification"):
            raise ConfigError(f"mode must be identification or classification, got {self.mode!r}")
        if not self.seeds:
            raise ConfigError("seeds list is empty")
        if self.mode == "identification" and self.split.num_known >= self.data.num_classes:
            raise ConfigError("identification mode needs unknown classes from the same dataset (num_known < num_classes)")
        if self.mode == "classification" and not self.data.outlier_source:
            raise ConfigError("classification mode needs data.outlier_source")
        n = self.gradients.ones_count
        if n is not None and (n == 1 or not 0 <= n <= self.split.num_inner_known):
            # The inner classifier has the fewest outputs, so it bounds n.
            raise ConfigError(f"gradients.ones_count {n} must be in 0..{self.split.num_inner_known} and not 1")
        if self.detector.head_policy not in ("exclude", "keep"):
            raise ConfigError(f"detector.head_policy must be exclude or keep, got {self.detector.head_policy!r}")
        unknown_baselines =set(self.eval.baselines) - {"softmax"}
        if unknown_baselines:
            raise ConfigError(f"unknown baselines {sorted(unknown_baselines)}")
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau {self.tau} must be in (0, 1)")

    @property
    def tau(self) -> float:
        # 0.5 for identification reporting, 0.95 for N+1 classification.
        if self.eval.tau is not None:
            return self.eval.tau
        return 0.5 if self.mode == "identification" else 0.95

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        """Hash of every section that shapes artifacts.

        ``eval`` only affects reporting and ``seeds`` artifacts are stored per
        seed, so neither is part of the hash.
        """
        d = self.to_dict()
        d.pop("eval")
        d.pop("seeds")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        return _build(cls, d, "config")


def _build(cls, d: Any, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    nested = {
        "data": DataConfig,
        "split": SplitConfig,
        "classifier": ClassifierConfig,
        "gradients": GradientConfig,
        "detector": DetectorConfig,
        "eval": EvalConfig,
    }
    for key, value in d.items():
        if cls is ExperimentConfig and key in nested:
            kwargs[key] = _build(nested[key], value or {}, f"{where}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return ExperimentConfig.from_dict(raw)


def override(cfg: ExperimentConfig, **changes: Any) -> ExperimentConfig:
    """Apply dotted-path scalar overrides, e.g. ``{"eval.tau": 0.9}``."""
    d = cfg.to_dict()
    for dotted, value in changes.items():
        node = d
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        if leaf not in node:
            raise ConfigError(f"cannot override unknown field {dotted}")
        node[leaf] = value
    return ExperimentConfig.from_dict(d)

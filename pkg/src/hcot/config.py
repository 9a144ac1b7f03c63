"""Experiment configuration: TOML in, TOML out, one hash per config."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from hcot.inference import InferenceConfig
from hcot.model import ModelConfig
from hcot.taskgen import TaskSpec
from hcot.training import STAGES, TrainConfig
from hcot.vocab import Vocab

OUTPUT_ROOT_ENV = "HCOT_OUTPUT_ROOT"
THREADS_ENV = "HCOT_THREADS"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train: int = 2000
    dev: int = 400
    test: int = 400

    def __post_init__(self):
        if min(self.train, self.dev, self.test) < 1:
            raise ConfigError("dataset sizes must be >= 1")

    @property
    def total(self) -> int:
        return self.train + self.dev + self.test

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train / self.total, self.dev / self.total, self.test / self.total)


def _default_train() -> dict[str, TrainConfig]:
    return {s: TrainConfig() for s in STAGES}


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "runs"
    task: TaskSpec = field(default_factory=lambda: TaskSpec("chain_arithmetic"))
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab_size=len(Vocab())))
    train: dict[str, TrainConfig] = field(default_factory=_default_train)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def stage_seed(self, purpose: str) -> int:
        return derive_seed(self.seed, purpose)

    def train_config(self, stage: str) -> TrainConfig:
        return dataclasses.replace(self.train[stage], seed=self.stage_seed(f"train:{stage}"))

    def to_dict(self) -> dict:
        d = asdict(self)
        # tomli_w has no null; drop optional fields that are unset
        return _drop_none(d)

    def fingerprint(self, exclude_output: bool = True) -> str:
        d = self.to_dict()
        if exclude_output:
            d.pop("output_dir", None)
            d.pop("name", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def run_root(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV) or self.output_dir
        return Path(root) / f"{self.name}-{self.fingerprint()}"


def derive_seed(global_seed: int, purpose: str) -> int:
    digest = hashlib.sha256(f"{global_seed}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _drop_none(d):
    if isinstance(d, dict):
        return {k: _drop_none(v) for k, v in d.items() if v is not None}
    return d


def _build(cls, raw: dict, where: str, **fixed):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    try:
        return cls(**{**raw, **fixed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    known = {"name", "seed", "output_dir", "task", "data", "model", "train", "inference"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    vocab_size = len(Vocab())
    model_raw = dict(raw.get("model", {}))
    if model_raw.get("vocab_size", vocab_size) != vocab_size:
        raise ConfigError(f"model.vocab_size must equal the vocabulary size {vocab_size}")
    model_raw["vocab_size"] = vocab_size
    train_raw = raw.get("train", {})
    shared = {k: v for k, v in train_raw.items() if not isinstance(v, dict)}
    unknown_stages = {k for k, v in train_raw.items() if isinstance(v, dict)} - set(STAGES)
    if unknown_stages:
        raise ConfigError(f"unknown train stages: {sorted(unknown_stages)}")
    train = {s: _build(TrainConfig, {**shared, **train_raw.get(s, {})}, f"train.{s}") for s in STAGES}
    task_raw = dict(raw.get("task", {"kind": "chain_arithmetic"}))
    try:
        seed = int(raw.get("seed", 0))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"seed: {exc}") from exc
    return ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        seed=seed,
        output_dir=str(raw.get("output_dir", "runs")),
        task=_build(TaskSpec, task_raw, "task"),
        data=_build(DataConfig, raw.get("data", {}), "data"),
        model=_build(ModelConfig, model_raw, "model"),
        train=train,
        inference=_build(InferenceConfig, raw.get("inference", {}), "inference"),
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def dumps_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps_config(cfg), encoding="utf-8")

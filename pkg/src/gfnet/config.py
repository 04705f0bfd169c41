"""Run configuration: one canonical JSON document resolving every knob.

Precedence is flags > file > built-in defaults. A single top-level ``seed``
feeds the model, every training stage and evaluation.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import fields
from pathlib import Path

from .errors import ConfigurationError
from .model import ModelConfig
from .trainer import PpoConfig, StageConfig

CONFIG_ENV = "GFNET_CONFIG"

# fields owned by the dataset or the top-level seed, not settable per section
_MODEL_DERIVED = {"in_channels", "image_size", "num_classes", "norm_mean", "norm_std", "seed"}


def _section(cls, derived=frozenset({"seed"}), **overrides) -> dict:
    d = {f.name: f.default for f in fields(cls) if f.name not in derived}
    d.update(overrides)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def defaults() -> dict:
    return {
        "seed": 0,
        "output_dir": "runs/default",
        "data": {"dir": "data", "train": "train.gfds", "val": "val.gfds", "test": "test.gfds"},
        "model": _section(ModelConfig, _MODEL_DERIVED),
        "stage0": _section(StageConfig, stage=0, epochs=5, lam=0.0, lr_encoder=0.05),
        "stage1": _section(StageConfig, stage=1, epochs=15),
        "ppo": _section(PpoConfig, epochs=5),
        "stage3": _section(StageConfig, stage=3, epochs=5, lr_classifier=0.01, lr_encoder=0.001),
        "eval": {"policy": "learned", "concurrency": 1, "calibration_split": "val", "split": "test"},
    }


def _check_keys(data: dict, schema: dict, where: str = "") -> None:
    for k, v in data.items():
        path = f"{where}.{k}" if where else k
        if k not in schema:
            raise ConfigurationError(f"unknown config key {path!r}")
        if isinstance(schema[k], dict):
            if not isinstance(v, dict):
                raise ConfigurationError(f"config key {path!r} must be a table")
            _check_keys(v, schema[k], path)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    """``section.key=value`` -> nested dict; the value is JSON, else a bare string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


class RunConfig:
    def __init__(self, data: dict | None = None):
        schema = defaults()
        data = data or {}
        _check_keys(data, schema)
        self.data = _merge(schema, data)
        self._validate()

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        """Defaults, then the file (``path`` or $GFNET_CONFIG), then ``overrides``."""
        path = path or os.environ.get(CONFIG_ENV)
        data: dict = {}
        if path:
            p = Path(path)
            if not p.exists():
                raise ConfigurationError(f"config file {p} not found")
            try:
                data = json.loads(p.read_text())
            except json.JSONDecodeError as err:
                raise ConfigurationError(f"config file {p}: {err}") from None
        _check_keys(data, defaults())
        for o in overrides:
            o = parse_override(o) if isinstance(o, str) else o
            _check_keys(o, defaults())
            data = _merge(data, o)
        return cls(data)

    def _validate(self) -> None:
        self.stage_config(0)
        self.stage_config(1)
        self.stage_config(3)
        self.ppo_config()
        self.model_config()

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.data["output_dir"])

    def split_path(self, split: str) -> Path:
        return Path(self.data["data"]["dir"]) / self.data["data"][split]

    def model_config(self, dataset=None) -> ModelConfig:
        d = dict(self.data["model"], seed=self.seed)
        if dataset is not None:
            mean, std = dataset.normalization()
            c, h, _ = dataset.image_shape
            d.update(in_channels=c, image_size=h, num_classes=dataset.num_classes,
                     norm_mean=[float(v) for v in mean], norm_std=[float(v) for v in std])
        try:
            return ModelConfig.from_dict(d)
        except TypeError as err:
            raise ConfigurationError(f"model config: {err}") from None

    def stage_config(self, stage: int) -> StageConfig:
        d = dict(self.data[f"stage{stage}"], seed=self.seed)
        if d.get("stage") != stage:
            raise ConfigurationError(f"stage{stage}.stage must be {stage}")
        return StageConfig(**d)

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(**dict(self.data["ppo"], seed=self.seed))

    def to_text(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2) + "\n"

    def write(self, directory) -> Path:
        path = Path(directory) / "config.json"
        path.write_text(self.to_text())
        return path

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.data == other.data


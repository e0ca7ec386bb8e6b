"""Experiment configuration: a YAML file with one section per component.

Command-line flags override file keys; file keys override defaults. Section
seeds that are not given explicitly derive from the top-level ``seed``.
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .data import SynthConfig
from .errors import ConfigError
from .model import NetConfig
from .objectives import CrcConfig, TraConfig
from .trainer import TrainConfig

SPLIT_KEYS = {"labelled_fraction", "n_labelled", "n_val", "n_test", "seed"}
INFER_KEYS = {"checkpoint", "inputs", "ids", "window", "strides", "cct", "cct_fraction", "connectivity", "model"}
EVAL_KEYS = {"predictions", "ground_truth", "bins"}
DATA_KEYS = {"dir", "n"}
TOP_KEYS = {"output_dir", "seed", "data", "synth", "split", "net", "train", "infer", "eval"}


def _field_names(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(section: str, given: dict, allowed: set):
    if not isinstance(given, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")


@dataclass
class ExperimentConfig:
    raw: Dict[str, Any] = field(default_factory=dict)
    text: str = ""

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[dict] = None) -> "ExperimentConfig":
        text = Path(path).read_text() if path else ""
        raw = yaml.safe_load(text) if text.strip() else {}
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must be a mapping at the top level")
        raw = copy.deepcopy(raw)
        for dotted, value in (overrides or {}).items():
            if value is None:
                continue
            node = raw
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = value
        cfg = cls(raw, text)
        cfg.validate()
        return cfg

    # -- validation -------------------------------------------------------
    def validate(self):
        _check_keys("<top>", self.raw, TOP_KEYS)
        _check_keys("data", self.raw.get("data", {}), DATA_KEYS)
        _check_keys("synth", self.raw.get("synth", {}), _field_names(SynthConfig))
        _check_keys("split", self.raw.get("split", {}), SPLIT_KEYS)
        _check_keys("net", self.raw.get("net", {}), _field_names(NetConfig))
        train = self.raw.get("train", {})
        _check_keys("train", train, _field_names(TrainConfig))
        _check_keys("train.crc", train.get("crc", {}), _field_names(CrcConfig))
        _check_keys("train.tra", train.get("tra", {}), _field_names(TraConfig))
        _check_keys("infer", self.raw.get("infer", {}), INFER_KEYS)
        _check_keys("eval", self.raw.get("eval", {}), EVAL_KEYS)
        # Build everything once so value errors surface at load time.
        self.synth(), self.net(), self.train()

    def require_paths(self, *dotted):
        for key in dotted:
            value = self.get(key)
            if value is None:
                raise ConfigError(f"missing required key '{key}'")
            if not Path(value).exists():
                raise ConfigError(f"path for '{key}' does not exist: {value}")

    def get(self, dotted: str, default=None):
        node = self.raw
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    # -- typed views ------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def output_dir(self) -> Path:
        return Path(self.raw.get("output_dir", "runs/default"))

    def synth(self) -> SynthConfig:
        d = dict(self.raw.get("synth", {}))
        d.setdefault("seed", self.seed)
        for k in ("dims", "n_objects", "radius_range", "distractor_radius"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            return SynthConfig(**d)
        except TypeError as e:
            raise ConfigError(f"synth: {e}") from None

    def net(self) -> NetConfig:
        try:
            return NetConfig(**self.raw.get("net", {}))
        except TypeError as e:
            raise ConfigError(f"net: {e}") from None

    def model_seeds(self):
        return 2 * self.seed + 1, 2 * self.seed + 2

    def train(self) -> TrainConfig:
        d = dict(self.raw.get("train", {}))
        d.setdefault("seed", self.seed)
        try:
            return TrainConfig(**d)
        except TypeError as e:
            raise ConfigError(f"train: {e}") from None

    def split_args(self) -> dict:
        d = dict(self.raw.get("split", {}))
        d.setdefault("seed", self.seed)
        d.setdefault("labelled_fraction", 0.1)
        return d

    def echo(self, directory: Path):
        from . import __version__

        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.yaml").write_text(self.text)
        resolved = dict(self.raw)
        resolved["tool_version"] = __version__
        (directory / "config.resolved.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True))

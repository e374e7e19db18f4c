"""Run configuration: one JSON document driving generate, cluster, train and eval."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .camera import CameraModel
from .synthesis import SynthesisConfig, config_hash

DEFAULTS = {
    "camera": CameraModel().to_dict(),
    "synthesis": {"n_train": 5000, "n_test": 1000, "sigma": 0.15, "pair_rate": 0.25,
                  "delta": 0.02, "backgrounds": True, "n_backgrounds": 32,
                  "background_files": [], "n_grasps": None, "grasps_path": None,
                  "noise_std": 0.0, "max_attempts": 1000, "max_pair_attempts": 20},
    "model": {"k": 20, "lam": 1e-4, "epochs": 30, "batch_size": 32, "max_iter": 100},
    "eval": {"tau_3d": 0.10},
    "paths": {"train": "train.egov", "test": "test.egov", "clusters": "clusters.json",
              "model": "model.egom", "report": "report.json"},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigError(f"unknown key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}{key!r} must be an object")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    seed: int
    camera: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["camera"]))
    synthesis: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["synthesis"]))
    model: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["model"]))
    eval: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["eval"]))
    paths: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["paths"]))

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        try:
            self.camera_model()
            self.synthesis_config("train")
            self.synthesis_config("test")
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        m = self.model
        if int(m["k"]) < 2:
            raise ConfigError("model.k must be at least 2")
        if m["lam"] <= 0 or int(m["epochs"]) < 1 or int(m["batch_size"]) < 1:
            raise ConfigError("model.lam, model.epochs and model.batch_size must be positive")
        if self.eval["tau_3d"] < 0:
            raise ConfigError("eval.tau_3d must be non-negative")
        paths = [str(Path(p)) for p in self.paths.values()]
        if len(set(paths)) != len(paths):
            raise ConfigError("artifact paths must be distinct")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if "seed" not in d:
            raise ConfigError("config must set 'seed'")
        merged = _merge({"seed": None, **DEFAULTS}, d, "")
        return cls(**merged)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "camera": self.camera, "synthesis": self.synthesis,
                "model": self.model, "eval": self.eval, "paths": self.paths}

    def override(self, **flat) -> "RunConfig":
        """Apply ``section.key=value`` style overrides (``None`` values are ignored)."""
        d = copy.deepcopy(self.to_dict())
        for dotted, val in flat.items():
            if val is None:
                continue
            parts = dotted.split(".")
            node = d
            for p in parts[:-1]:
                node = node[p]
            node[parts[-1]] = val
        return RunConfig.from_dict(d)

    def camera_model(self) -> CameraModel:
        return CameraModel.from_dict(self.camera)

    def synthesis_config(self, split: str) -> SynthesisConfig:
        """Train records use seeds ``seed + i``; test records follow on from the last train seed."""
        s = dict(self.synthesis)
        n_train, n_test = int(s.pop("n_train")), int(s.pop("n_test"))
        if split == "train":
            return SynthesisConfig(n=n_train, seed=self.seed, **s)
        if split == "test":
            return SynthesisConfig(n=n_test, seed=self.seed + n_train, **s)
        raise ValueError(f"unknown split {split!r}")

    def stage_hash(self, stage: str) -> str:
        """Hash of everything a stage's artifact depends on."""
        cam = self.camera
        parts = {"train": {"camera": cam, "synthesis": self.synthesis_config("train").to_dict()},
                 "test": {"camera": cam, "synthesis": self.synthesis_config("test").to_dict()}}
        parts["clusters"] = {"train": parts["train"], "seed": self.seed,
                             "k": self.model["k"], "max_iter": self.model["max_iter"]}
        parts["model"] = {"clusters": parts["clusters"], "model": self.model}
        parts["report"] = {"model": parts["model"], "test": parts["test"], "eval": self.eval}
        if stage not in parts:
            raise ValueError(f"unknown stage {stage!r}")
        return config_hash(parts[stage])

    def resolve(self, key: str, workdir: Optional[Path] = None) -> Path:
        p = Path(self.paths[key])
        return p if p.is_absolute() or workdir is None else Path(workdir) / p

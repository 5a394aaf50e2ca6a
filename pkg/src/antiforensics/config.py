"""Run configuration: one JSON file with a section per concern.

Unknown keys are rejected at every level so a typo fails loudly before any
compute starts.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .attacks import AttackConfig
from .data import SplitSpec
from .harness import SettingError, SettingSpec
from .losses import LossWeights
from .models import ConcealerConfig, LocalizerConfig
from .training import TrainConfig

RUN_ROOT_ENV = "ANTIFORENSICS_RUN_ROOT"
CONFIG_ECHO = "run_config.json"


class ConfigError(ValueError):
    pass


@dataclass
class SynthSection:
    seed: int = 0
    size: int = 64
    count: int = 200


@dataclass
class DataSection:
    root: str | None = None  # dataset dir or manifest; None means "pass --data"
    size: int = 64
    split: SplitSpec = field(default_factory=SplitSpec)
    synth: SynthSection = field(default_factory=SynthSection)


def _toy_concealer():
    return ConcealerConfig(depth=3, base_channels=16, dilation_rates=[2, 4])


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    concealer: ConcealerConfig = field(default_factory=_toy_concealer)
    localizer: LocalizerConfig = field(default_factory=LocalizerConfig)
    surrogate: LocalizerConfig = field(default_factory=LocalizerConfig.small)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: list[SettingSpec] = field(default_factory=list)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# nested dataclass fields, so the strict builder knows what to recurse into
_NESTED = {
    RunConfig: {
        "data": DataSection,
        "concealer": ConcealerConfig,
        "localizer": LocalizerConfig,
        "surrogate": LocalizerConfig,
        "train": TrainConfig,
        "attack": AttackConfig,
    },
    DataSection: {"split": SplitSpec, "synth": SynthSection},
    TrainConfig: {"weights": LossWeights},
}


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    kw = {}
    for key, value in raw.items():
        sub = _NESTED.get(cls, {}).get(key)
        if sub is not None:
            kw[key] = _build(sub, value, f"{where}.{key}")
        elif cls is RunConfig and key == "eval":
            if not isinstance(value, list):
                raise ConfigError(f"{where}.eval: expected a list of settings")
            kw[key] = [_build(SettingSpec, v, f"{where}.eval[{i}]") for i, v in enumerate(value)]
        else:
            kw[key] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError, SettingError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw, "config")


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a RunConfig from JSON (or defaults), apply dotted overrides
    like {"train.max_iters": 100}, and validate."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    cfg = config_from_dict(raw)
    validate_paths(cfg)
    return cfg


def validate_paths(cfg: RunConfig) -> None:
    if cfg.data.root is not None and not Path(cfg.data.root).exists():
        raise ConfigError(f"data.root does not exist: {cfg.data.root}")
    for i, s in enumerate(cfg.eval):
        for key in ("target", "surrogate", "generator"):
            ref = getattr(s, key)
            if ref and not Path(ref).exists():
                raise ConfigError(f"eval[{i}].{key} does not exist: {ref}")


def resolve_out(out) -> Path:
    """Relative --out paths live under $ANTIFORENSICS_RUN_ROOT when it is set."""
    out = Path(out)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def echo_config(run_dir, cfg: RunConfig, command: str, args: dict) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / CONFIG_ECHO
    payload = {"command": command, "args": args, "config": cfg.to_dict()}
    path.write_text(json.dumps(payload, indent=2, default=str))
    return path

"""Run configuration: YAML file, environment, and dotted ``--set`` overrides.

Precedence, lowest first: built-in defaults, the config file, the
``FOVIT_OUTPUT_DIR`` environment variable, command-line overrides.  The fully
resolved configuration is echoed on every run and written next to the
outputs, so a run can be reproduced from its echo alone.
"""

from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import DatasetSpec
from .vit import ModelConfig

OUTPUT_DIR_ENV = "FOVIT_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class LayoutConfig:
    file: str | None = None  # region table in layout-dump format; canonical layout when unset


@dataclass
class TrainingConfig:
    target: str = "both"  # foveated | unfoveated | both
    epochs: int = 30
    unfoveated_epochs: int = 8
    batch_size: int = 64
    lr_init: float = 3e-4
    lr_min: float = 3e-5
    weight_decay: float = 1e-8
    n_fixations: int = 5
    seed: int = 0
    save_every_epoch: bool = False


@dataclass
class EpisodeSection:
    n_fixations: int = 5
    policies: list[str] = field(default_factory=lambda: ["guided", "random"])
    seed: int = 0
    batch_size: int = 250
    n_images: int | None = None  # validation images to use; all when unset


@dataclass
class EnsembleConfig:
    n_stages: int = 5
    threshold: float | None = None  # computed on the training split when unset
    threshold_images: int | None = 2000
    seed: int = 0


@dataclass
class AttackSection:
    kinds: list[str] = field(default_factory=lambda: ["fgsm", "pgd"])
    epsilons: list[float] = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.2, 0.4])
    pgd_steps: int = 10
    pgd_step_size: float | None = None
    random_start: bool = True
    seed: int = 0
    n_images: int = 200
    batch_size: int = 100
    models: list[str] = field(default_factory=lambda: ["foveated", "unfoveated"])


@dataclass
class TraceSection:
    split: str = "val"
    indices: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    policy: str = "guided"
    threshold: float | None = None


@dataclass
class CheckpointPaths:
    # default to <output_dir>/checkpoints/<name>.ckpt when unset
    foveated: str | None = None
    unfoveated: str | None = None


@dataclass
class Config:
    output_dir: str = "runs/default"
    reference_mode: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    layout: LayoutConfig = field(default_factory=LayoutConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    episode: EpisodeSection = field(default_factory=EpisodeSection)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    attack: AttackSection = field(default_factory=AttackSection)
    trace: TraceSection = field(default_factory=TraceSection)
    checkpoints: CheckpointPaths = field(default_factory=CheckpointPaths)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def checkpoint(self, name: str) -> Path:
        given = getattr(self.checkpoints, name)
        return Path(given) if given else self.out / "checkpoints" / f"{name}.ckpt"


# --- building dataclasses from plain dicts --------------------------------


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{where}: null is not allowed")
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(arg, value, where)
            except ConfigError:
                pass
        raise ConfigError(f"{where}: cannot interpret {value!r} as {tp}")
    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {value!r}")
        return from_dict(tp, value, where)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        (item,) = typing.get_args(tp) or (Any,)
        return [_coerce(item, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: dict, where: str = "config"):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


# --- loading ---------------------------------------------------------------


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b.c=value`` to (``["a", "b", "c"]``, parsed value); the value is read as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    path = key.strip().split(".")
    if not all(path):
        raise ConfigError(f"bad override key {key!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value in {text!r}: {exc}") from exc
    return path, value


def set_dotted(data: dict, path: list[str], value) -> None:
    node = data
    for part in path[:-1]:
        nxt = node.get(part)
        if nxt is None:
            nxt = node[part] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot set {'.'.join(path)}: {part} is not a section")
        node = nxt
    node[path[-1]] = value


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(
    path: str | Path | None = None,
    overrides: list[str] | None = None,
    environ: dict | None = None,
) -> Config:
    data = Config().to_dict()
    if path is not None:
        try:
            with open(path) as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data = _merge(data, loaded)
    environ = os.environ if environ is None else environ
    if environ.get(OUTPUT_DIR_ENV):
        data["output_dir"] = environ[OUTPUT_DIR_ENV]
    for text in overrides or []:
        key, value = parse_override(text)
        set_dotted(data, key, value)
    cfg = from_dict(Config, data)
    validate(cfg)
    return cfg


def validate(cfg: Config) -> None:
    if cfg.training.target not in ("foveated", "unfoveated", "both"):
        raise ConfigError("training.target must be foveated, unfoveated or both")
    for p in cfg.episode.policies:
        if p not in ("guided", "random"):
            raise ConfigError(f"episode.policies: unknown policy {p!r}")
    for k in cfg.attack.kinds:
        if k not in ("fgsm", "pgd"):
            raise ConfigError(f"attack.kinds: unknown attack {k!r}")
    for m in cfg.attack.models:
        if m not in ("foveated", "unfoveated"):
            raise ConfigError(f"attack.models: unknown model {m!r}")
    if any(e < 0 for e in cfg.attack.epsilons):
        raise ConfigError("attack.epsilons must be non-negative")
    if cfg.trace.split not in ("train", "val"):
        raise ConfigError("trace.split must be train or val")
    if cfg.dataset.image_side != cfg.model.image_side:
        raise ConfigError("dataset.image_side must equal model.image_side")
    if cfg.dataset.kind == "synthetic" and cfg.dataset.synthetic.canvas != cfg.model.image_side:
        raise ConfigError("dataset.synthetic.canvas must equal model.image_side")

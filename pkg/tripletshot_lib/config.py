"""
Run configuration: one YAML document mapped onto frozen dataclasses.

Unknown keys are rejected at every level with the dotted path of the key.
``--set section.key=value`` overrides are applied to the raw mapping before
validation; their values are parsed as YAML scalars, so ``--set
train.max_iterations=50`` gives an int and ``--set arch.batch_norm=false`` a
bool.
"""
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple, Union

import yaml

from .augment import AugmentParams
from .containers import atomic_write_text
from .datasets import SplitSpec
from .exceptions import ConfigError
from .losses import LossConfig
from .network import ArchConfig
from .training import FinetuneConfig, TrainConfig

EPISODE_PROTOCOLS = ("sampled", "omniglot_fixed")


@dataclass(frozen=True)
class DataConfig:
    base_cache: Optional[str] = None
    validation_cache: Optional[str] = None
    novel_cache: Optional[str] = None
    omniglot_runs_dir: Optional[str] = None
    omniglot_runs_resize: Optional[int] = None


@dataclass(frozen=True)
class EpisodeConfig:
    protocol: str = "sampled"
    way: int = 5
    queries_per_class: int = 1
    runs: int = 10
    seed: Optional[int] = None

    def __post_init__(self):
        if self.protocol not in EPISODE_PROTOCOLS:
            raise ConfigError(f"episodes.protocol must be one of {EPISODE_PROTOCOLS}, got {self.protocol!r}")
        if self.way < 2 or self.queries_per_class < 1 or self.runs < 1:
            raise ConfigError("episodes need way >= 2, queries_per_class >= 1 and runs >= 1")


@dataclass(frozen=True)
class EvaluationConfig:
    checkpoint: Optional[str] = None
    layer: str = "fc-1"
    workers: int = 0

    def __post_init__(self):
        if self.workers < 0:
            raise ConfigError("evaluation.workers must be >= 0")


@dataclass(frozen=True)
class ProjectionConfig:
    checkpoint: Optional[str] = None
    cache: Optional[str] = None
    classes: Tuple[str, ...] = ()
    dims: int = 2

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(str(c) for c in self.classes))
        if self.dims < 1:
            raise ConfigError("projection.dims must be positive")


@dataclass(frozen=True)
class RunConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    episodes: EpisodeConfig = field(default_factory=EpisodeConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    seed: int = 0
    output_dir: Optional[str] = None
    deterministic: bool = False

    def to_dict(self) -> Dict[str, Any]:
        raw = _plain(dataclasses.asdict(self))
        raw["arch"] = _plain(self.arch.to_dict())
        return raw


_SECTIONS = {
    "loss": LossConfig,
    "train": TrainConfig,
    "finetune": FinetuneConfig,
    "augment": AugmentParams,
    "data": DataConfig,
    "split": SplitSpec,
    "episodes": EpisodeConfig,
    "evaluation": EvaluationConfig,
    "projection": ProjectionConfig,
}
_TOP_LEVEL = ("seed", "output_dir", "deterministic")
_TUPLE_FIELDS = {"shear_x", "shear_y", "rotation_deg", "scale", "translate_frac", "contrast",
                 "counts", "parts", "runs", "classes", "input_shape", "blocks"}
_ARCH_FIELDS = {f.name for f in dataclasses.fields(ArchConfig)} | {"channels"}


def _plain(value):
    if isinstance(value, Mapping):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _tuples(value):
    if isinstance(value, list):
        return tuple(_tuples(v) for v in value)
    return value


def _build(cls, raw: Optional[Mapping], path: str):
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path} must be a mapping, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key {path}.{key}")
    values = {k: _tuples(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {path} section: {e}") from None


def _build_arch(raw: Optional[Mapping]) -> ArchConfig:
    raw = dict(raw or {})
    for key in raw:
        if key not in _ARCH_FIELDS:
            raise ConfigError(f"unknown config key arch.{key}")
    try:
        return ArchConfig.from_dict(raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid arch section: {e}") from None


def parse_override(item: str) -> Tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, text = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = yaml.safe_load(text) if text.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse override value {text!r}: {e}") from None
    return key, value


def apply_overrides(raw: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    raw = _plain(raw)
    for item in overrides or ():
        key, value = parse_override(item)
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            elif not isinstance(child, dict):
                raise ConfigError(f"override {key!r} descends into the non-mapping {part!r}")
            node = child
        node[parts[-1]] = value
    return raw


def build_run_config(raw: Optional[Mapping]) -> RunConfig:
    raw = dict(raw or {})
    for key in raw:
        if key not in _SECTIONS and key not in _TOP_LEVEL and key != "arch":
            raise ConfigError(f"unknown config key {key}")
    sections = {name: _build(cls, raw.get(name), name) for name, cls in _SECTIONS.items()}
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    # section seeds left unset follow the run seed
    if sections["train"].seed is None:
        sections["train"] = dataclasses.replace(sections["train"], seed=seed)
    if sections["episodes"].seed is None:
        sections["episodes"] = dataclasses.replace(sections["episodes"], seed=seed)
    if sections["split"].seed is None:
        sections["split"] = dataclasses.replace(sections["split"], seed=seed)
    return RunConfig(
        arch=_build_arch(raw.get("arch")),
        seed=seed,
        output_dir=raw.get("output_dir"),
        deterministic=bool(raw.get("deterministic", False)),
        **sections,
    )


def read_yaml(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        loaded = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from None
    if loaded is None:
        return {}
    if not isinstance(loaded, Mapping):
        raise ConfigError(f"config file {path} must hold a mapping at the top level")
    return dict(loaded)


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = (),
                    deterministic: bool = False) -> RunConfig:
    raw = read_yaml(path) if path else {}
    raw = apply_overrides(raw, overrides)
    if deterministic:
        raw["deterministic"] = True
    config = build_run_config(raw)
    if config.deterministic:
        config = dataclasses.replace(
            config,
            train=dataclasses.replace(config.train, prefetch_workers=0),
            evaluation=dataclasses.replace(config.evaluation, workers=0),
        )
    return config


def dump_run_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True, default_flow_style=False)


def write_resolved_config(config: RunConfig, output_dir: Union[str, Path]) -> Path:
    return atomic_write_text(Path(output_dir) / "resolved_config.yaml", dump_run_config(config))

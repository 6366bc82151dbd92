"""Run configuration: nested dataclasses, strict JSON loading, dotted overrides, hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from .data import DomainSpec, default_domains
from .fourier import PerturbConfig
from .meta import MetaConfig
from .model import BackboneConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    k: int = 3
    use_dynamic: bool = True
    reduction: int = 4
    in_affine: bool = False


@dataclass
class DataConfig:
    root: Optional[str] = None           # dataset directory (PNG + index.json); generated in memory if absent
    domains: list[DomainSpec] = field(default_factory=default_domains)
    train_domain: str = "A"
    holdout_size: int = 500              # held-out source images for the sanity row
    crop: Optional[int] = 64             # train-time crop size after reflect padding; None disables
    natural_pool: str = "procedural"     # or a directory of images
    natural_pool_size: int = 500


@dataclass
class EvalConfig:
    threshold: float = 0.5
    batch_size: int = 256


@dataclass
class RunConfig:
    name: str = "sddg"
    output_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    checkpoint_every: int = 0

    def validate(self) -> "RunConfig":
        # eta is owned by the meta section and forwarded to the perturbation
        self.perturb.eta = self.meta.eta
        try:
            self.model.backbone.validate()
            self.meta.validate()
            self.perturb.validate()
            for spec in self.data.domains:
                spec.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.model.use_dynamic and self.model.k < 2:
            raise ConfigError(f"model.k must be >= 2, got {self.model.k}")
        names = [d.name for d in self.data.domains]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate domain names: {names}")
        if self.data.root is None and self.data.train_domain not in names:
            raise ConfigError(f"train_domain {self.data.train_domain!r} not among domains {names}")
        size = self.model.backbone.image_size
        for spec in self.data.domains:
            if spec.image_size != size:
                raise ConfigError(f"domain {spec.name!r} image_size {spec.image_size} != backbone {size}")
        if self.data.crop is not None and self.data.crop != size:
            raise ConfigError(f"crop must equal image_size ({size}) or be null")
        if self.data.natural_pool_size < 1:
            raise ConfigError("natural_pool_size must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return _digest(self.to_dict())

    def arch_hash(self) -> str:
        b = self.model.backbone
        return _digest({"arch": b.arch, "in_channels": b.in_channels, "feature_channels": b.feature_channels,
                        "image_size": b.image_size, "k": self.model.k, "use_dynamic": self.model.use_dynamic,
                        "reduction": self.model.reduction, "in_affine": self.model.in_affine})

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.name


def _digest(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _build(tp: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    if origin in (Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return None if value is None else _build(args[0], value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        (item,) = typing.get_args(tp)
        return [_build(item, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        hints = typing.get_type_hints(tp)
        known = {f.name for f in dataclasses.fields(tp)}
        unknown = set(value) - known
        if unknown:
            raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
        return tp(**{k: _build(hints[k], v, f"{path}.{k}".lstrip(".")) for k, v in value.items()})
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp in (int, float, str, bool) and not isinstance(value, tp):
        raise ConfigError(f"{path}: expected {tp.__name__}, got {value!r}")
    return value


def from_dict(d: dict) -> RunConfig:
    return _build(RunConfig, d, "").validate()


def load_config(path: Union[str, Path, None], overrides: Optional[list[str]] = None) -> RunConfig:
    """Load a JSON config (defaults if ``path`` is None) and apply ``a.b.c=value`` overrides."""
    d = RunConfig().to_dict() if path is None else json.loads(Path(path).read_text())
    for item in overrides or []:
        apply_override(d, item)
    return from_dict(d)


def apply_override(d: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    if key == "perturb.eta":
        key = "meta.eta"
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    *parents, leaf = key.split(".")
    node: Any = d
    for p in parents:
        if isinstance(node, list):
            node = node[int(p)]
            continue
        node = node.setdefault(p, {})
    if isinstance(node, list):
        node[int(leaf)] = value
    else:
        node[leaf] = value


def save_config(cfg: RunConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

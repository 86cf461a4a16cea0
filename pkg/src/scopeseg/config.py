"""Pipeline configuration.

Every CLI flag has a key here; values load from JSON or YAML and flags
override file values.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

SIMILARITY_SOURCES = ("clip_qq", "clip_kk", "clip_vv", "clip_qkqk", "dino_qk", "ones")
MASK_SOURCES = ("sam", "groundtruth", "none")
CLIP_BACKBONES = {
    # name -> (default model id, patch size)
    "b16": ("facebook/metaclip-b16-fullcc2.5b", 16),
    "l14": ("facebook/metaclip-l14-fullcc2.5b", 14),
    "h14": ("laion/CLIP-ViT-H-14-laion2B-s32B-b79K", 14),
}


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    provider: str = "live"
    clip: str = "b16"
    clip_model: str | None = None
    dino_model: str = "facebook/dino-vitb8"
    sam_model: str = "facebook/sam2.1-hiera-large"
    device: str = "cpu"

    similarity: str = "auto"
    mask_source: str = "sam"
    pred_iou_thresh: float = 0.7
    stability_thresh: float = 0.7
    points: int = 32
    multimask: bool = True
    eps: float = 0.2
    samples: int = 1
    tau: float = 0.25
    window: int = 336
    stride: int = 112
    resize_short: int | None = 336

    sr: bool = True
    vr: bool = True
    mc: bool = True
    nc: bool = True

    templates: str | list[str] = "imagenet"
    plural_map: str | dict[str, list[str]] | None = None
    background_subclasses: str | list[str] | None = None

    heads: int = 1

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.clip not in CLIP_BACKBONES:
            raise ConfigError(f"clip must be one of {sorted(CLIP_BACKBONES)}, got {self.clip!r}")
        if self.similarity != "auto" and self.similarity not in SIMILARITY_SOURCES:
            raise ConfigError(f"similarity must be 'auto' or one of {SIMILARITY_SOURCES}, got {self.similarity!r}")
        if self.mask_source not in MASK_SOURCES:
            raise ConfigError(f"mask_source must be one of {MASK_SOURCES}, got {self.mask_source!r}")
        for key in ("pred_iou_thresh", "stability_thresh"):
            v = getattr(self, key)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{key} must lie in [0, 1], got {v}")
        if self.points < 1:
            raise ConfigError("points must be >= 1")
        if self.eps < 0 or self.samples < 0:
            raise ConfigError("eps and samples must be non-negative")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.window < 1 or self.stride < 1 or self.stride > self.window:
            raise ConfigError(f"need 1 <= stride <= window, got stride={self.stride} window={self.window}")
        if self.resize_short is not None and self.resize_short < 1:
            raise ConfigError("resize_short must be positive or null")
        if self.heads != 1:
            raise ConfigError("only single-head attention is supported (heads: 1)")

    @property
    def patch_size(self) -> int:
        return CLIP_BACKBONES[self.clip][1]

    @property
    def clip_model_id(self) -> str:
        return self.clip_model or CLIP_BACKBONES[self.clip][0]

    @property
    def similarity_source(self) -> str:
        """Resolved similarity source; 'auto' follows the value-reconstruction toggle."""
        if self.similarity == "auto":
            return "dino_qk" if self.vr else "clip_qq"
        return self.similarity

    @property
    def scope_enabled(self) -> bool:
        return self.sr and self.mask_source != "none"

    def replace(self, **changes: Any) -> PipelineConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PipelineConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**data)


def load_mapping(path: str | Path) -> Any:
    """Read a JSON or YAML file (chosen by suffix; YAML also parses JSON)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        return json.loads(text)
    return yaml.safe_load(text)


def load_config(path: str | Path | None = None, **overrides: Any) -> PipelineConfig:
    data: dict[str, Any] = {}
    if path is not None:
        loaded = load_mapping(path) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data.update(loaded)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig.from_dict(data)


@dataclass
class DatasetConfig:
    """Where a benchmark lives and how its labels map onto class indices."""

    root: str
    name: str = "dataset"
    layout: str = "generic"
    classes: list[str] = field(default_factory=list)
    classes_file: str | None = None
    ignore_value: int = 255
    background_index: int | None = None
    background_subclasses: list[str] | None = None
    plural_map: str | dict[str, list[str]] | None = None
    resize_short: int | None = None
    split: str = "val"
    label_suffix: str | None = None

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: Path | None = None) -> DatasetConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown dataset config keys: {unknown}")
        cfg = cls(**data)
        if base_dir is not None and not Path(cfg.root).is_absolute():
            cfg.root = str((base_dir / cfg.root).resolve())
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> DatasetConfig:
        path = Path(path)
        data = load_mapping(path)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data, base_dir=path.parent)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

"""Training-free open-vocabulary segmentation with region-scoped attention."""

from __future__ import annotations

from .config import DatasetConfig, PipelineConfig, load_config
from .pipeline import build_classes, segment_image

__all__ = ["DatasetConfig", "PipelineConfig", "build_classes", "load_config", "segment_image"]
__version__ = "0.1.0"

from __future__ import annotations

from .archive import TensorArchive
from .base import (
    ClassEmbeddingTable,
    ClipVisual,
    FeatureGrid,
    Projection,
    Provider,
    ProviderError,
    ProviderMissingError,
    RawMaskProposal,
    embed_classes,
    extract_clip_visual,
    extract_dino_qk,
    generate_mask_proposals,
)
from .fixture import FixtureProvider, RecordingProvider

__all__ = [
    "ClassEmbeddingTable",
    "ClipVisual",
    "FeatureGrid",
    "FixtureProvider",
    "Projection",
    "Provider",
    "ProviderError",
    "ProviderMissingError",
    "RawMaskProposal",
    "RecordingProvider",
    "TensorArchive",
    "embed_classes",
    "extract_clip_visual",
    "extract_dino_qk",
    "generate_mask_proposals",
    "make_provider",
]


def make_provider(spec: str, cfg=None, class_names=None) -> Provider:
    """Build a provider from a ``provider`` config value.

    ``live`` loads transformers models named in ``cfg``; ``fixture:<path>``
    replays an archive; ``synthetic`` derives features from planted scenes.
    """
    if spec.startswith("fixture:"):
        return FixtureProvider.from_path(spec.split(":", 1)[1])
    if spec == "synthetic":
        from .synthetic import SyntheticProvider

        if not class_names:
            raise ValueError("the synthetic provider needs the class names")
        if cfg is None:
            return SyntheticProvider(class_names)
        return SyntheticProvider(class_names, templates=cfg.templates, patch_size=cfg.patch_size)
    if spec == "live":
        from .live import LiveProvider

        return LiveProvider.from_config(cfg)
    raise ValueError(f"unknown provider {spec!r}; use live, synthetic or fixture:<path>")

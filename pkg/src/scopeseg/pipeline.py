"""End-to-end segmentation of one image: names, masks, slide inference, corrections."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig
from .correction import (
    ExpandedClasses,
    expand_class_names,
    load_background_subclasses,
    load_plural_map,
    mode_correct,
)
from .interp import resize_bilinear, resize_nearest
from .masks import RegionMaskSet, masks_from_labels, threshold_and_flatten
from .providers.base import (
    ClassEmbeddingTable,
    Provider,
    embed_classes,
    generate_mask_proposals,
)
from .providers.templates import resolve_templates
from .segmentation import SegmentationMap, SlideResult, resize_short_side, slide_inference

log = logging.getLogger(__name__)


@dataclass
class ClassSetup:
    expanded: ExpandedClasses
    table: ClassEmbeddingTable
    class_names: list[str]


def build_classes(
    provider: Provider,
    classes: list[str],
    cfg: PipelineConfig,
    background_index: int | None = None,
    dataset: str | None = None,
) -> ClassSetup:
    """Expand names (when name correction is on) and embed them."""
    if cfg.nc:
        plural = load_plural_map(cfg.plural_map)
        subclasses = load_background_subclasses(cfg.background_subclasses, dataset)
        expanded = expand_class_names(classes, plural, subclasses, True, background_index)
    else:
        expanded = expand_class_names(classes, {}, None, False, background_index)
    table = embed_classes(
        provider,
        expanded.name_variants,
        resolve_templates(cfg.templates),
        class_names=expanded.class_names,
        background_index=expanded.background_index,
    )
    return ClassSetup(expanded, table, list(classes))


def region_masks(
    provider: Provider,
    image: np.ndarray,
    cfg: PipelineConfig,
    gt: np.ndarray | None = None,
    ignore_value: int = 255,
) -> RegionMaskSet | None:
    """Flattened image-level region masks from the configured mask source."""
    if cfg.mask_source == "none" or not (cfg.sr or cfg.mc):
        return None
    if cfg.mask_source == "groundtruth":
        if gt is None:
            raise ValueError("mask_source=groundtruth needs a ground-truth label map")
        gt = resize_nearest(np.asarray(gt), image.shape[:2])
        return threshold_and_flatten(masks_from_labels(gt, ignore_value), 0.0, 0.0, image.shape[:2])
    proposals = generate_mask_proposals(provider, image, cfg.points, cfg.multimask)
    return threshold_and_flatten(proposals, cfg.pred_iou_thresh, cfg.stability_thresh, image.shape[:2])


@dataclass
class PipelineResult:
    seg: SegmentationMap
    raw: SegmentationMap
    regions: RegionMaskSet | None
    slide: SlideResult


def segment_image(
    image: np.ndarray,
    provider: Provider,
    setup: ClassSetup,
    cfg: PipelineConfig,
    gt: np.ndarray | None = None,
    ignore_value: int = 255,
) -> PipelineResult:
    """Segment ``image`` into ``setup.class_names``; output matches the input size.

    ``raw`` is the map before mode correction; ``seg`` after it (identical
    when correction is off).
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    resized = resize_short_side(image, cfg.resize_short)
    masks = region_masks(provider, resized, cfg, gt, ignore_value)
    slide = slide_inference(resized, provider, setup.table, cfg, masks)

    logits = setup.expanded.fold_logits(slide.seg.logits, axis=0)
    if resized.shape[:2] != (h, w):
        logits = np.moveaxis(resize_bilinear(np.moveaxis(logits, 0, 2), (h, w)), 2, 0)
    raw = SegmentationMap.from_logits(logits, ignore_value)

    regions = slide.regions
    if regions is not None and resized.shape[:2] != (h, w):
        regions = RegionMaskSet(resize_nearest(regions.pixel_labels, (h, w)), regions.members, merged=regions.merged)
    seg = raw
    if cfg.mc and regions is not None:
        seg = mode_correct(raw, regions)
    return PipelineResult(seg, raw, regions, slide)


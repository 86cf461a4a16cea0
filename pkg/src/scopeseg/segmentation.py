"""Attention over CLIP values, text-embedding classification, and slide inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np
from PIL import Image

from .config import PipelineConfig
from .correlation import InteractionMask, masked_attention, semantic_matrix, similarity
from .interp import resize_bilinear
from .masks import (
    UNSEGMENTED,
    RegionMaskSet,
    cluster_groups,
    crop,
    merge_regions,
    rasterize_to_patches,
    region_feature_sums,
    region_features,
    relabel,
)
from .providers.base import (
    ClassEmbeddingTable,
    ClipVisual,
    FeatureGrid,
    Projection,
    Provider,
    extract_clip_visual,
    extract_dino_qk,
)


@dataclass
class SegmentationMap:
    labels: np.ndarray
    logits: np.ndarray
    ignore_value: int = 255
    corrected: bool = False

    @property
    def num_classes(self) -> int:
        return self.logits.shape[0]

    @classmethod
    def from_logits(cls, logits: np.ndarray, ignore_value: int = 255) -> SegmentationMap:
        # np.argmax takes the first maximum, i.e. the lowest class index on ties.
        return cls(np.argmax(logits, axis=0).astype(np.int64), logits, ignore_value)


@dataclass
class WindowPlan:
    window: int
    stride: int
    placements: list[tuple[int, int]]
    height: int
    width: int

    def coverage(self) -> np.ndarray:
        count = np.zeros((self.height, self.width), dtype=np.int64)
        for top, left in self.placements:
            count[top:top + self.window, left:left + self.window] += 1
        return count


def _axis_offsets(size: int, window: int, stride: int) -> list[int]:
    steps = max(size - window + stride - 1, 0) // stride + 1
    return [min(i * stride, size - window) for i in range(steps)]


def plan_windows(height: int, width: int, window: int, stride: int) -> WindowPlan:
    """Tile a (possibly padded) image; the last row/column is clamped in bounds.

    Images smaller than the window are padded up to it, so the plan's
    ``height``/``width`` may exceed the input size.
    """
    if stride < 1 or stride > window:
        raise ValueError(f"need 1 <= stride <= window, got {stride}, {window}")
    ph, pw = max(height, window), max(width, window)
    placements = list(product(_axis_offsets(ph, window, stride), _axis_offsets(pw, window, stride)))
    return WindowPlan(window, stride, placements, ph, pw)


def resize_short_side(image: np.ndarray, short: int | None) -> np.ndarray:
    if short is None:
        return image
    h, w = image.shape[:2]
    if min(h, w) == short:
        return image
    scale = short / min(h, w)
    size = (max(1, round(w * scale)), max(1, round(h * scale)))
    return np.asarray(Image.fromarray(np.asarray(image, dtype=np.uint8)).resize(size, Image.BILINEAR))


def patch_features(attn: np.ndarray, values: FeatureGrid, proj: Projection) -> FeatureGrid:
    """Apply attention to the value grid and project into text space."""
    attn = np.asarray(attn, dtype=np.float64)
    if attn.shape != (values.n, values.n):
        raise ValueError(f"attention {attn.shape} does not match {values.n} value tokens")
    if not np.allclose(attn.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("attention rows must sum to 1")
    mixed = attn @ np.asarray(values.data, dtype=np.float64)
    out = proj.apply(mixed)
    return FeatureGrid(out, values.rows, values.cols, "img")


def classify(features: FeatureGrid, table: ClassEmbeddingTable) -> np.ndarray:
    """Cosine logits (N, K) between patch features and class embeddings."""
    if features.dim != table.dim:
        raise ValueError(f"feature dim {features.dim} != text dim {table.dim}")
    x = np.asarray(features.data, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    unit = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    return unit @ table.embeddings.T


def pooling_source(cfg: PipelineConfig) -> str:
    """Feature grid pooled into region features for merging."""
    source = cfg.similarity_source
    return "clip_vv" if source == "ones" else source


def _feature_grid(source: str, clip: ClipVisual, provider: Provider, window_img: np.ndarray,
                  cache: dict[str, FeatureGrid]) -> FeatureGrid:
    if source in cache:
        return cache[source]
    if source == "clip_qq":
        grid = clip.q
    elif source == "clip_kk":
        grid = clip.k
    elif source == "clip_vv":
        grid = clip.v
    elif source == "clip_qkqk":
        grid = FeatureGrid(clip.q.data + clip.k.data, clip.q.rows, clip.q.cols, "clip_qk")
    elif source == "dino_qk":
        grid = extract_dino_qk(provider, window_img, clip.shape)
    else:
        raise ValueError(f"no feature grid for source {source!r}")
    cache[source] = grid
    return grid


@dataclass
class WindowOutput:
    logits: np.ndarray
    region_sums: np.ndarray | None = None
    region_counts: np.ndarray | None = None
    region_members: list[tuple[int, ...]] = field(default_factory=list)
    mask: InteractionMask | None = None


def segment_window(
    window_img: np.ndarray,
    masks: RegionMaskSet | None,
    provider: Provider,
    table: ClassEmbeddingTable,
    cfg: PipelineConfig,
) -> WindowOutput:
    """Per-window pipeline up to patch logits of shape (rows, cols, K).

    ``masks`` is the pixel-level region set cropped to this window, or
    ``None`` when no region masks are in play.
    """
    clip = extract_clip_visual(provider, window_img, cfg.patch_size)
    rows, cols = clip.shape
    n = rows * cols
    cache: dict[str, FeatureGrid] = {}
    source = cfg.similarity_source
    feats = None if source == "ones" else _feature_grid(source, clip, provider, window_img, cache)
    sim = similarity(feats, source, n, normalize=cfg.vr)

    out = WindowOutput(logits=np.empty(0))
    interaction = InteractionMask.full(n)
    if masks is not None:
        raster = rasterize_to_patches(masks, (rows, cols), cfg.patch_size)
        pool = _feature_grid(pooling_source(cfg), clip, provider, window_img, cache)
        out.region_sums, out.region_counts = region_feature_sums(raster, pool)
        out.region_members = raster.members
        if cfg.sr:
            merged = merge_regions(raster, region_features(raster, pool), cfg.eps, cfg.samples)
            interaction = semantic_matrix(merged, sim)

    if cfg.vr:
        attn = masked_attention(sim, interaction, "value_recon", tau=cfg.tau)
    else:
        attn = masked_attention(sim, interaction, "scope_only", d=clip.v.dim)
    img = patch_features(attn, clip.v, clip.proj)
    out.logits = classify(img, table).reshape(rows, cols, table.k)
    out.mask = interaction
    return out


@dataclass
class SlideResult:
    seg: SegmentationMap
    regions: RegionMaskSet | None
    plan: WindowPlan
    count: np.ndarray


def slide_inference(
    image: np.ndarray,
    provider: Provider,
    table: ClassEmbeddingTable,
    cfg: PipelineConfig,
    masks: RegionMaskSet | None = None,
) -> SlideResult:
    """Window-tiled inference over an already-resized image.

    ``masks`` are the flattened region masks for the whole image. Each
    window sees them cropped and re-rasterized; per-window patch logits are
    upsampled bilinearly and averaged over overlapping windows. The returned
    ``regions`` are the image-level masks merged with features pooled across
    all windows, ready for mode correction.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    win = cfg.window
    plan = plan_windows(h, w, win, cfg.stride)
    if (plan.height, plan.width) != (h, w):
        padded = np.zeros((plan.height, plan.width, 3), dtype=image.dtype)
        padded[:h, :w] = image
        image = padded
        if masks is not None:
            labels = np.full((plan.height, plan.width), UNSEGMENTED, dtype=np.int32)
            labels[:h, :w] = masks.pixel_labels
            masks = RegionMaskSet(labels, masks.members, scores=masks.scores, merged=masks.merged)
    if masks is not None and masks.shape != (plan.height, plan.width):
        raise ValueError(f"mask set {masks.shape} does not match image {(h, w)}")

    total = np.zeros((table.k, plan.height, plan.width), dtype=np.float64)
    count = np.zeros((plan.height, plan.width), dtype=np.int64)
    global_sums = global_counts = None
    if masks is not None:
        global_counts = np.zeros(masks.z, dtype=np.int64)
    index_of = {m: i for i, m in enumerate(masks.members)} if masks is not None else {}

    for top, left in plan.placements:
        window_img = image[top:top + win, left:left + win]
        window_masks = crop(masks, top, left, win, win) if masks is not None else None
        out = segment_window(window_img, window_masks, provider, table, cfg)
        up = resize_bilinear(out.logits, (win, win))
        total[:, top:top + win, left:left + win] += np.moveaxis(up, 2, 0)
        count[top:top + win, left:left + win] += 1
        if out.region_sums is not None:
            if global_sums is None:
                global_sums = np.zeros((masks.z, out.region_sums.shape[1]))
            for row, member in enumerate(out.region_members):
                g = index_of[member]
                global_sums[g] += out.region_sums[row]
                global_counts[g] += out.region_counts[row]

    logits = (total / count[None])[:, :h, :w]
    seg = SegmentationMap.from_logits(logits)

    regions = None
    if masks is not None:
        regions = RegionMaskSet(masks.pixel_labels[:h, :w], masks.members, scores=masks.scores)
        regions = _merge_global(regions, global_sums, global_counts, cfg)
    return SlideResult(seg, regions, plan, count[:h, :w])


def _merge_global(regions: RegionMaskSet, sums: np.ndarray | None, counts: np.ndarray, cfg: PipelineConfig) -> RegionMaskSet:
    """Image-level merge using region features pooled over every window."""
    groups = np.arange(regions.z)
    seen = np.flatnonzero(counts > 0)
    if sums is not None and seen.size:
        feats = sums[seen] / counts[seen, None]
        sub = cluster_groups(feats, cfg.eps, cfg.samples)
        groups[seen] = regions.z + sub
        # Regions never rasterized in any window keep their own group.
    return relabel(regions, groups)

"""Region masks: flattening proposals, patch rasterization, pooling and merging.

A :class:`RegionMaskSet` stores its regions as a label map (``-1`` marks
unsegmented area), so disjointness and exact coverage hold by
construction. The boolean per-region stacks are derived on demand.
"""

from __future__ import annotations

from collections import deque
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .providers.base import FeatureGrid, RawMaskProposal

UNSEGMENTED = -1


@dataclass
class RegionMaskSet:
    pixel_labels: np.ndarray
    members: list[tuple[int, ...]]
    patch_labels: np.ndarray | None = None
    grid: tuple[int, int] | None = None
    scores: np.ndarray | None = None
    merged: bool = False

    def __post_init__(self) -> None:
        self.pixel_labels = np.asarray(self.pixel_labels, dtype=np.int32)
        if self.patch_labels is not None:
            self.patch_labels = np.asarray(self.patch_labels, dtype=np.int32)
        self.members = [tuple(m) for m in self.members]

    @property
    def z(self) -> int:
        return len(self.members)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixel_labels.shape

    @property
    def pixel_masks(self) -> np.ndarray:
        return self.pixel_labels[None, :, :] == np.arange(self.z)[:, None, None]

    @property
    def unsegmented_pixel(self) -> np.ndarray:
        return self.pixel_labels == UNSEGMENTED

    @property
    def patch_masks(self) -> np.ndarray:
        if self.patch_labels is None:
            raise ValueError("mask set has not been rasterized to patches")
        return self.patch_labels[None, :] == np.arange(self.z)[:, None]

    @property
    def unsegmented_patch(self) -> np.ndarray:
        if self.patch_labels is None:
            raise ValueError("mask set has not been rasterized to patches")
        return self.patch_labels == UNSEGMENTED

    def check(self) -> None:
        """Assert the structural invariants; raises ``AssertionError``."""
        px = self.pixel_labels
        assert px.min(initial=UNSEGMENTED) >= UNSEGMENTED and px.max(initial=UNSEGMENTED) < self.z
        present = np.bincount(px[px >= 0].ravel(), minlength=self.z)
        assert np.all(present > 0), "a region has no pixels"
        if self.patch_labels is not None:
            pl = self.patch_labels
            assert self.grid is not None and pl.shape == (self.grid[0] * self.grid[1],)
            assert pl.min(initial=UNSEGMENTED) >= UNSEGMENTED and pl.max(initial=UNSEGMENTED) < self.z
            counts = np.bincount(pl[pl >= 0], minlength=self.z)
            assert np.all(counts > 0), "a region has no patches"
        if self.scores is not None:
            assert self.scores.shape == (self.z, 2)

    def to_proposals(self) -> list[RawMaskProposal]:
        if self.scores is None:
            raise ValueError("mask set carries no proposal scores")
        return [
            RawMaskProposal(self.pixel_labels == i, float(s[0]), float(s[1]))
            for i, s in enumerate(self.scores)
        ]


@dataclass
class RegionFeatureTable:
    features: np.ndarray
    region_ids: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if not self.region_ids:
            self.region_ids = list(range(self.features.shape[0]))
        if len(self.region_ids) != self.features.shape[0]:
            raise ValueError("region_ids and features disagree")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("region features contain non-finite values")


def empty_mask_set(shape: tuple[int, int]) -> RegionMaskSet:
    return RegionMaskSet(np.full(shape, UNSEGMENTED, dtype=np.int32), [], scores=np.zeros((0, 2)))


def _compact(labels: np.ndarray, keep: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Drop regions where ``keep`` is false; returns (new labels, old->new map)."""
    remap = np.full(keep.shape[0] + 1, UNSEGMENTED, dtype=np.int32)
    remap[:-1][keep] = np.arange(int(keep.sum()), dtype=np.int32)
    # index -1 lands on the trailing slot, which stays UNSEGMENTED
    return remap[labels], remap


def threshold_and_flatten(
    proposals: Sequence[RawMaskProposal],
    pred_iou_thresh: float,
    stability_thresh: float,
    image_shape: tuple[int, int] | None = None,
) -> RegionMaskSet:
    """Filter proposals by score and resolve overlaps into disjoint regions.

    Survivors are ranked by predicted IoU, then stability, then area (all
    descending), then input order; each pixel goes to the first mask in
    that ranking that covers it. Masks left without pixels are dropped.
    """
    if not (0.0 <= pred_iou_thresh <= 1.0 and 0.0 <= stability_thresh <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    if image_shape is None:
        if not proposals:
            raise ValueError("image_shape is required when there are no proposals")
        image_shape = proposals[0].mask.shape
    # Same comparison operators as SAM's automatic mask generator.
    kept = [
        (i, p) for i, p in enumerate(proposals)
        if p.predicted_iou > pred_iou_thresh and p.stability_score >= stability_thresh
    ]
    kept.sort(key=lambda ip: (-ip[1].predicted_iou, -ip[1].stability_score, -ip[1].area, ip[0]))

    labels = np.full(image_shape, UNSEGMENTED, dtype=np.int32)
    for rank, (_, prop) in enumerate(kept):
        if prop.mask.shape != tuple(image_shape):
            raise ValueError(f"proposal shape {prop.mask.shape} != image shape {tuple(image_shape)}")
        labels[prop.mask & (labels == UNSEGMENTED)] = rank

    present = np.bincount(labels[labels >= 0].ravel(), minlength=len(kept)) > 0
    labels, _ = _compact(labels, present)
    scores = np.array(
        [[p.predicted_iou, p.stability_score] for (_, p), keep in zip(kept, present) if keep],
        dtype=np.float64,
    ).reshape(-1, 2)
    z = int(present.sum())
    return RegionMaskSet(labels, [(i,) for i in range(z)], scores=scores)


def rasterize_to_patches(mask_set: RegionMaskSet, grid: tuple[int, int], patch_px: int) -> RegionMaskSet:
    """Assign each patch to the label covering most of its pixels.

    Candidates are the regions and the unsegmented area; ties go to the
    lower region index, and any region beats unsegmented on a tie. Regions
    that win no patch are dropped and their pixels become unsegmented.
    """
    rows, cols = grid
    h, w = mask_set.shape
    if (rows * patch_px, cols * patch_px) != (h, w):
        raise ValueError(f"grid {rows}x{cols} at {patch_px}px does not match masks {h}x{w}")
    z = mask_set.z
    # Column j < z counts region j; column z counts unsegmented pixels.
    slot = np.where(mask_set.pixel_labels >= 0, mask_set.pixel_labels, z)
    patch_of_pixel = (np.arange(h)[:, None] // patch_px) * cols + np.arange(w)[None, :] // patch_px
    counts = np.bincount(
        (patch_of_pixel * (z + 1) + slot).ravel(), minlength=rows * cols * (z + 1)
    ).reshape(rows * cols, z + 1)
    winner = np.argmax(counts, axis=1)
    patch_labels = np.where(winner == z, UNSEGMENTED, winner).astype(np.int32)

    keep = np.bincount(patch_labels[patch_labels >= 0], minlength=z) > 0
    pixel_labels, remap = _compact(mask_set.pixel_labels, keep)
    patch_labels = remap[patch_labels]
    return RegionMaskSet(
        pixel_labels,
        [m for m, k in zip(mask_set.members, keep) if k],
        patch_labels=patch_labels,
        grid=(rows, cols),
        scores=None if mask_set.scores is None else mask_set.scores[keep],
        merged=mask_set.merged,
    )


def crop(mask_set: RegionMaskSet, top: int, left: int, height: int, width: int) -> RegionMaskSet:
    """Pixel-level crop; regions absent from the window are dropped."""
    labels = mask_set.pixel_labels[top:top + height, left:left + width]
    if labels.shape != (height, width):
        raise ValueError("crop window leaves the mask bounds")
    keep = np.bincount(labels[labels >= 0].ravel(), minlength=mask_set.z) > 0
    labels, _ = _compact(labels, keep)
    return RegionMaskSet(
        labels,
        [m for m, k in zip(mask_set.members, keep) if k],
        scores=None if mask_set.scores is None else mask_set.scores[keep],
        merged=mask_set.merged,
    )


def region_feature_sums(mask_set: RegionMaskSet, features: FeatureGrid) -> tuple[np.ndarray, np.ndarray]:
    """Per-region sum of feature rows and patch counts."""
    if mask_set.patch_labels is None:
        raise ValueError("mask set has not been rasterized to patches")
    if mask_set.patch_labels.shape[0] != features.n:
        raise ValueError(f"mask set has {mask_set.patch_labels.shape[0]} patches, features have {features.n}")
    data = np.asarray(features.data, dtype=np.float64)
    sums = np.zeros((mask_set.z, features.dim))
    inside = mask_set.patch_labels >= 0
    np.add.at(sums, mask_set.patch_labels[inside], data[inside])
    counts = np.bincount(mask_set.patch_labels[inside], minlength=mask_set.z)
    return sums, counts


def region_features(mask_set: RegionMaskSet, features: FeatureGrid) -> RegionFeatureTable:
    """Mask average pooling of ``features`` over each region's patches."""
    sums, counts = region_feature_sums(mask_set, features)
    assert np.all(counts > 0), "empty patch mask"
    return RegionFeatureTable(sums / counts[:, None], list(range(mask_set.z)))


def cosine_distances(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    unit = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    dist = np.clip(1.0 - unit @ unit.T, 0.0, 2.0)
    np.fill_diagonal(dist, 0.0)
    return dist


def dbscan(features: np.ndarray, eps: float, min_samples: int) -> np.ndarray:
    """DBSCAN under cosine distance. Returns cluster ids, ``-1`` for noise.

    A point's neighbourhood includes itself and every point at distance
    ``<= eps``; core points have at least ``min_samples`` neighbours.
    Clusters are numbered in order of their lowest-index core point, and a
    border point joins the first cluster that reaches it.
    """
    if eps < 0 or min_samples < 1:
        raise ValueError("need eps >= 0 and min_samples >= 1")
    n = len(features)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    neighbours = cosine_distances(features) <= eps
    if min_samples == 1:
        # Every point is core: clusters are connected components of the eps-graph.
        return _components(neighbours)
    core = neighbours.sum(axis=1) >= min_samples
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            j = queue.popleft()
            if not core[j]:
                continue
            for nb in np.flatnonzero(neighbours[j]):
                if labels[nb] == -1:
                    labels[nb] = cluster
                    queue.append(nb)
        cluster += 1
    return labels


def _components(adjacency: np.ndarray) -> np.ndarray:
    n = adjacency.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for start in range(n):
        if labels[start] != -1:
            continue
        labels[start] = cluster
        stack = [start]
        while stack:
            j = stack.pop()
            for nb in np.flatnonzero(adjacency[j] & (labels == -1)):
                labels[nb] = cluster
                stack.append(nb)
        cluster += 1
    return labels


def relabel(mask_set: RegionMaskSet, groups: np.ndarray) -> RegionMaskSet:
    """Union regions sharing a group id; output order follows each group's first region."""
    groups = np.asarray(groups)
    if groups.shape != (mask_set.z,):
        raise ValueError("need one group id per region")
    order: dict[int, int] = {}
    for g in groups.tolist():
        order.setdefault(g, len(order))
    remap = np.array([order[g] for g in groups.tolist()] + [UNSEGMENTED], dtype=np.int32)
    members: list[list[int]] = [[] for _ in order]
    for region, g in enumerate(groups.tolist()):
        members[order[g]].extend(mask_set.members[region])
    return RegionMaskSet(
        remap[mask_set.pixel_labels],
        [tuple(sorted(m)) for m in members],
        patch_labels=None if mask_set.patch_labels is None else remap[mask_set.patch_labels],
        grid=mask_set.grid,
        scores=None,
        merged=True,
    )


def cluster_groups(features: np.ndarray, eps: float, min_samples: int) -> np.ndarray:
    """Group id per region; noise regions get their own singleton group."""
    z = len(features)
    if z == 0 or min_samples == 0:
        return np.arange(z)
    labels = dbscan(features, eps, min_samples)
    noise = labels == -1
    labels[noise] = labels.max(initial=-1) + 1 + np.arange(int(noise.sum()))
    return labels


def merge_regions(mask_set: RegionMaskSet, table: RegionFeatureTable, eps: float, min_samples: int) -> RegionMaskSet:
    """Union regions whose pooled features cluster together under DBSCAN.

    ``min_samples=0`` disables merging (the mask set comes back unchanged
    apart from the ``merged`` flag).
    """
    if eps < 0 or min_samples < 0:
        raise ValueError("need eps >= 0 and min_samples >= 0")
    if table.features.shape[0] != mask_set.z:
        raise ValueError("feature table does not match the mask set")
    if mask_set.z == 0:
        return mask_set
    return relabel(mask_set, cluster_groups(table.features, eps, min_samples))


def masks_from_labels(label_map: np.ndarray, ignore_value: int | None = None) -> list[RawMaskProposal]:
    """One full-confidence proposal per class present in a ground-truth map."""
    props = []
    for value in np.unique(label_map):
        if ignore_value is not None and value == ignore_value:
            continue
        props.append(RawMaskProposal(label_map == value, 1.0, 1.0))
    return props

"""Model-free provider that derives features from planted scene images.

Synthetic scenes encode their ground truth in the pixels: the red channel
holds the class index, green the instance id (0 = no instance) and blue a
noise byte per pixel. :class:`SyntheticProvider` turns a window of such an
image into CLIP/DINO-like grids, text embeddings and mask proposals, with
knobs for the failure modes the pipeline is meant to fix: noisy values,
outlier patches that attract attention, and fragmented or missing masks.
"""

from __future__ import annotations

import zlib
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .base import ClipVisual, FeatureGrid, Projection, RawMaskProposal, embed_classes, image_key
from .templates import resolve_templates


@dataclass
class SceneNoise:
    value_noise: float = 0.0      # std of per-patch noise added to CLIP values
    query_noise: float = 0.0      # std of per-patch noise on CLIP q/k
    outlier_rate: float = 0.0     # fraction of patches acting as attention sinks
    outlier_gain: float = 30.0    # norm of an outlier's shared q/k direction
    sink_coupling: float = 1.0    # every patch's q/k component along that direction
    dino_noise: float = 0.0       # std of per-patch noise on DINO features
    split_prob: float = 0.0       # chance an instance comes back as two fragments
    drop_prob: float = 0.0        # chance a fragment gets a sub-threshold score


def _word_vector(word: str, dim: int) -> np.ndarray:
    rng = np.random.default_rng(zlib.crc32(word.encode("utf-8")))
    return rng.standard_normal(dim) / np.sqrt(dim)


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _block_mode(channel: np.ndarray, p: int) -> np.ndarray:
    """Most frequent value in each p x p block (ties to the smaller value)."""
    h, w = channel.shape
    blocks = channel.reshape(h // p, p, w // p, p).transpose(0, 2, 1, 3).reshape(h // p, w // p, p * p)
    flat = blocks.reshape(-1, p * p).astype(np.int64)
    counts = np.zeros((flat.shape[0], 256), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(flat.shape[0]), p * p), flat.ravel()), 1)
    return counts.argmax(axis=1).reshape(h // p, w // p)


def _block_seeds(channel: np.ndarray, p: int, salt: int) -> np.ndarray:
    h, w = channel.shape
    seeds = np.empty((h // p, w // p), dtype=np.int64)
    for i in range(h // p):
        for j in range(w // p):
            block = np.ascontiguousarray(channel[i * p:(i + 1) * p, j * p:(j + 1) * p])
            seeds[i, j] = zlib.crc32(block.tobytes(), salt)
    return seeds


class SyntheticProvider:
    """Deterministic features computed from the content of synthetic scenes."""

    def __init__(
        self,
        class_names: Sequence[str],
        templates: str | Sequence[str] = "single",
        patch_size: int = 16,
        dino_patch_size: int = 8,
        clip_dim: int = 32,
        text_dim: int = 32,
        dino_dim: int = 24,
        noise: SceneNoise | None = None,
        seed: int = 0,
    ):
        self.patch_size = patch_size
        self.dino_patch_size = dino_patch_size
        self.class_names = list(class_names)
        self.text_dim = text_dim
        self.noise = noise or SceneNoise()
        self.seed = seed
        rng = np.random.default_rng(seed)
        k = len(self.class_names)
        # Orthogonal value->text map; values are planted as concept @ W.T so proj recovers them.
        q_mat, _ = np.linalg.qr(rng.standard_normal((text_dim, text_dim)))
        self._w = q_mat[:clip_dim] if clip_dim <= text_dim else None
        if self._w is None:
            raise ValueError("clip_dim must not exceed text_dim")
        self.projection = Projection.linear(self._w.astype(np.float32))
        self._q_class = _unit_rows(rng, k, clip_dim)
        self._k_class = _unit_rows(rng, k, clip_dim)
        self._sink = _unit_rows(rng, 1, clip_dim)[0]
        self._dino_class = _unit_rows(rng, k, dino_dim)
        self._dino_inst = _unit_rows(rng, 256, dino_dim)
        table = embed_classes(self, [[n] for n in self.class_names], resolve_templates(templates))
        self.concepts = table.embeddings

    def embed_text(self, prompts: Sequence[str]) -> np.ndarray:
        rows = []
        for prompt in prompts:
            words = "".join(c if c.isalnum() else " " for c in prompt.lower()).split()
            rows.append(np.sum([_word_vector(wd, self.text_dim) for wd in words], axis=0))
        return np.asarray(rows, dtype=np.float32)

    def clip_visual(self, image: np.ndarray) -> ClipVisual:
        p = self.patch_size
        cls = _block_mode(image[:, :, 0], p)
        seeds = _block_seeds(image[:, :, 2], p, self.seed)
        rows, cols = cls.shape
        nz = self.noise
        dim = self._q_class.shape[1]
        q = np.empty((rows, cols, dim))
        k = np.empty((rows, cols, dim))
        v = np.empty((rows, cols, dim))
        n_cls = len(self.class_names)
        for i in range(rows):
            for j in range(cols):
                c = int(cls[i, j]) % n_cls
                rng = np.random.default_rng(int(seeds[i, j]))
                outlier = rng.random() < nz.outlier_rate
                sink = nz.outlier_gain if outlier else nz.sink_coupling
                q[i, j] = 2.0 * self._q_class[c] + sink * self._sink + nz.query_noise * rng.standard_normal(dim)
                k[i, j] = 2.0 * self._k_class[c] + sink * self._sink + nz.query_noise * rng.standard_normal(dim)
                target = (c + 1 + int(rng.integers(n_cls - 1))) % n_cls if (outlier and n_cls > 1) else c
                concept = self.concepts[target] + nz.value_noise * rng.standard_normal(self.text_dim)
                v[i, j] = concept @ self._w.T
        to_grid = lambda a, tag: FeatureGrid.from_image(a.astype(np.float32), tag)  # noqa: E731
        return ClipVisual(to_grid(q, "clip_q"), to_grid(k, "clip_k"), to_grid(v, "clip_v"), self.projection)

    def dino_qk(self, image: np.ndarray) -> FeatureGrid:
        p = self.dino_patch_size
        cls = _block_mode(image[:, :, 0], p)
        inst = _block_mode(image[:, :, 1], p)
        seeds = _block_seeds(image[:, :, 2], p, self.seed + 1)
        n_cls = len(self.class_names)
        dim = self._dino_class.shape[1]
        out = np.empty(cls.shape + (dim,))
        for i in range(cls.shape[0]):
            for j in range(cls.shape[1]):
                rng = np.random.default_rng(int(seeds[i, j]))
                out[i, j] = (
                    self._dino_class[int(cls[i, j]) % n_cls]
                    + 0.2 * self._dino_inst[int(inst[i, j])]
                    + self.noise.dino_noise * rng.standard_normal(dim)
                )
        return FeatureGrid.from_image(out.astype(np.float32), "dino_qk")

    def mask_proposals(self, image: np.ndarray, grid_points: int, multimask: bool) -> list[RawMaskProposal]:
        inst = image[:, :, 1]
        rng = np.random.default_rng(zlib.crc32(image_key(image).encode(), self.seed + 2))
        proposals = []
        for value in np.unique(inst):
            if value == 0:
                continue
            region = inst == value
            pieces = [region]
            if rng.random() < self.noise.split_prob:
                cols = np.flatnonzero(region.any(axis=0))
                cut = cols[len(cols) // 2] if cols.size > 1 else None
                if cut is not None:
                    left = region.copy()
                    left[:, cut:] = False
                    pieces = [m for m in (left, region & ~left) if m.any()]
            for piece in pieces:
                dropped = rng.random() < self.noise.drop_prob
                iou = 0.5 if dropped else float(rng.uniform(0.75, 1.0))
                stab = float(rng.uniform(0.75, 1.0))
                proposals.append(RawMaskProposal(piece, iou, stab))
        limit = grid_points * grid_points * (3 if multimask else 1)
        return proposals[:limit]


@dataclass
class Scene:
    image: np.ndarray
    labels: np.ndarray
    class_names: list[str] = field(default_factory=list)


def make_scene(
    rng: np.random.Generator,
    height: int,
    width: int,
    num_classes: int,
    unit: int = 16,
    max_bands: int = 6,
    orientation: str | None = None,
) -> Scene:
    """Bands of random classes aligned to ``unit``-pixel patches.

    Bands run along one axis only, so every patch boundary separates at most
    two classes and bilinear upsampling of patch logits cannot flip a pixel.
    """
    if orientation is None:
        orientation = "vertical" if rng.random() < 0.5 else "horizontal"
    length = width if orientation == "vertical" else height
    units = length // unit
    n_bands = int(rng.integers(2, max(3, min(max_bands, units) + 1)))
    cuts = np.sort(rng.choice(np.arange(1, units), size=n_bands - 1, replace=False)) * unit
    edges = [0, *cuts.tolist(), length]
    band_class = []
    for _ in range(n_bands):
        choices = [c for c in range(num_classes) if not band_class or c != band_class[-1]]
        band_class.append(int(rng.choice(choices)))
    line = np.empty(length, dtype=np.int64)
    inst_line = np.empty(length, dtype=np.int64)
    for b, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        line[lo:hi] = band_class[b]
        inst_line[lo:hi] = b + 1
    if orientation == "vertical":
        labels = np.broadcast_to(line[None, :], (height, width)).copy()
        inst = np.broadcast_to(inst_line[None, :], (height, width)).copy()
    else:
        labels = np.broadcast_to(line[:, None], (height, width)).copy()
        inst = np.broadcast_to(inst_line[:, None], (height, width)).copy()
    image = np.stack(
        [labels.astype(np.uint8), inst.astype(np.uint8), rng.integers(0, 256, (height, width), dtype=np.uint8)],
        axis=2,
    )
    return Scene(image, labels)

"""Provider contracts and the data types they exchange.

A provider hands out four things: CLIP's last-layer q/k/v grids with a
projection into text space, DINO's summed query+key grid, text
embeddings for prompt strings, and raw mask proposals. The functions in
this module wrap a provider and enforce the shape contracts so fixture
and live providers are interchangeable downstream.
"""

from __future__ import annotations

import hashlib
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from ..interp import resize_bilinear

FEATURE_TAGS = ("clip_q", "clip_k", "clip_v", "clip_qk", "dino_q", "dino_k", "dino_qk", "img")


class ProviderError(RuntimeError):
    pass


class ProviderMissingError(ProviderError):
    """Raised when a model-backed capability has neither a model nor a fixture."""


@dataclass
class FeatureGrid:
    data: np.ndarray
    rows: int
    cols: int
    source_tag: str

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError(f"feature data must be 2-D (N, dim), got shape {self.data.shape}")
        if self.data.shape[0] != self.rows * self.cols:
            raise ValueError(
                f"feature rows {self.data.shape[0]} != grid {self.rows}x{self.cols}"
            )
        if self.source_tag not in FEATURE_TAGS:
            raise ValueError(f"unknown source tag {self.source_tag!r}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"{self.source_tag} grid contains non-finite values")

    @property
    def n(self) -> int:
        return self.rows * self.cols

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def as_image(self) -> np.ndarray:
        return self.data.reshape(self.rows, self.cols, self.dim)

    @classmethod
    def from_image(cls, arr: np.ndarray, source_tag: str) -> FeatureGrid:
        rows, cols, dim = arr.shape
        return cls(np.asarray(arr).reshape(rows * cols, dim), rows, cols, source_tag)


@dataclass
class Projection:
    """Maps attended value tokens into the text embedding space.

    Composes the last block's attention output projection, an optional
    LayerNorm, and the image-to-text projection. Linear weights follow the
    ``(out_features, in_features)`` convention.
    """

    out_weight: np.ndarray
    out_bias: np.ndarray | None = None
    ln_weight: np.ndarray | None = None
    ln_bias: np.ndarray | None = None
    ln_eps: float = 1e-5
    text_weight: np.ndarray | None = None

    @property
    def in_dim(self) -> int:
        return self.out_weight.shape[1]

    @property
    def out_dim(self) -> int:
        if self.text_weight is not None:
            return self.text_weight.shape[0]
        return self.out_weight.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"projection expects dim {self.in_dim}, got {x.shape[-1]}")
        y = x @ np.asarray(self.out_weight, dtype=np.float64).T
        if self.out_bias is not None:
            y = y + self.out_bias
        if self.ln_weight is not None:
            mu = y.mean(axis=-1, keepdims=True)
            var = y.var(axis=-1, keepdims=True)
            y = (y - mu) / np.sqrt(var + self.ln_eps) * self.ln_weight
            if self.ln_bias is not None:
                y = y + self.ln_bias
        if self.text_weight is not None:
            y = y @ np.asarray(self.text_weight, dtype=np.float64).T
        return y

    def __call__(self, grid: FeatureGrid) -> FeatureGrid:
        return FeatureGrid(self.apply(grid.data), grid.rows, grid.cols, "img")

    @classmethod
    def linear(cls, matrix: np.ndarray) -> Projection:
        """Plain ``x @ matrix`` map; matrix has shape (in_dim, out_dim)."""
        return cls(out_weight=np.asarray(matrix, dtype=np.float64).T)

    @classmethod
    def identity(cls, dim: int) -> Projection:
        return cls(out_weight=np.eye(dim))

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"out_weight": np.asarray(self.out_weight)}
        for name in ("out_bias", "ln_weight", "ln_bias", "text_weight"):
            value = getattr(self, name)
            if value is not None:
                arrays[name] = np.asarray(value)
        arrays["ln_eps"] = np.array([self.ln_eps])
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> Projection:
        eps = arrays.get("ln_eps")
        return cls(
            out_weight=arrays["out_weight"],
            out_bias=arrays.get("out_bias"),
            ln_weight=arrays.get("ln_weight"),
            ln_bias=arrays.get("ln_bias"),
            ln_eps=float(eps[0]) if eps is not None else 1e-5,
            text_weight=arrays.get("text_weight"),
        )


@dataclass
class ClipVisual:
    q: FeatureGrid
    k: FeatureGrid
    v: FeatureGrid
    proj: Projection

    @property
    def shape(self) -> tuple[int, int]:
        return self.v.shape


@dataclass
class ClassEmbeddingTable:
    embeddings: np.ndarray
    class_names: list[str]
    name_variants: list[list[str]]
    background_index: int | None = None
    background_subclasses: list[str] | None = None

    def __post_init__(self) -> None:
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        k = len(self.class_names)
        if k < 1:
            raise ValueError("need at least one class")
        if self.embeddings.shape[0] != k or len(self.name_variants) != k:
            raise ValueError("embeddings, class_names and name_variants disagree on K")
        for name, variants in zip(self.class_names, self.name_variants):
            if not variants or name not in variants:
                raise ValueError(f"variants for {name!r} must be non-empty and contain the name")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ValueError("class embeddings must have unit L2 norm")

    @property
    def k(self) -> int:
        return len(self.class_names)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class RawMaskProposal:
    mask: np.ndarray
    predicted_iou: float
    stability_score: float

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ValueError("proposal mask must be 2-D")
        if not self.mask.any():
            raise ValueError("proposal mask is empty")
        for name in ("predicted_iou", "stability_score"):
            v = float(getattr(self, name))
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
            setattr(self, name, v)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@runtime_checkable
class Provider(Protocol):
    patch_size: int

    def clip_visual(self, image: np.ndarray) -> ClipVisual: ...

    def dino_qk(self, image: np.ndarray) -> FeatureGrid: ...

    def embed_text(self, prompts: Sequence[str]) -> np.ndarray: ...

    def mask_proposals(self, image: np.ndarray, grid_points: int, multimask: bool) -> list[RawMaskProposal]: ...


def image_key(image: np.ndarray) -> str:
    """Content hash used to index per-image tensors in fixture archives."""
    arr = np.ascontiguousarray(image)
    h = hashlib.sha1()
    h.update(f"{arr.dtype.str}:{arr.shape}".encode())
    h.update(arr.tobytes())
    return h.hexdigest()[:20]


def text_key(prompt: str) -> str:
    return hashlib.sha1(prompt.encode("utf-8")).hexdigest()[:20]


def check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    return image


def extract_clip_visual(provider: Provider, image: np.ndarray, patch_size: int | None = None) -> ClipVisual:
    """Final-layer pre-attention q/k/v grids plus the text-space projection."""
    image = check_image(image)
    p = provider.patch_size
    if patch_size is not None and patch_size != p:
        raise ValueError(f"configured patch size {patch_size} does not match backbone patch size {p}")
    h, w = image.shape[:2]
    if h < p or w < p:
        raise ValueError(f"image {h}x{w} is smaller than one {p}px patch")
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {p}")
    out = provider.clip_visual(image)
    expected = (h // p, w // p)
    for grid in (out.q, out.k, out.v):
        if grid.shape != expected:
            raise ProviderError(f"provider returned grid {grid.shape}, expected {expected}")
    if out.proj.in_dim != out.v.dim:
        raise ProviderError("projection input dim does not match value dim")
    return out


def extract_dino_qk(provider: Provider, image: np.ndarray, target_grid: tuple[int, int] | None = None) -> FeatureGrid:
    """DINO's final-layer Q+K, resampled onto ``target_grid`` when shapes differ."""
    image = check_image(image)
    native = provider.dino_qk(image)
    if target_grid is None or tuple(target_grid) == native.shape:
        if target_grid is None and native.shape != (image.shape[0] // provider.patch_size,
                                                    image.shape[1] // provider.patch_size):
            raise ValueError("DINO grid differs from the CLIP grid and no target grid was given")
        return FeatureGrid(native.data, native.rows, native.cols, "dino_qk")
    resized = resize_bilinear(native.as_image(), tuple(target_grid))
    return FeatureGrid.from_image(resized, "dino_qk")


def embed_classes(
    provider: Provider,
    name_variants: Sequence[Sequence[str]],
    templates: Sequence[str],
    class_names: Sequence[str] | None = None,
    background_index: int | None = None,
    background_subclasses: Sequence[str] | None = None,
) -> ClassEmbeddingTable:
    """Prompt-ensemble every (template, variant) pair, mean-pool, normalize once."""
    if not templates:
        raise ValueError("need at least one prompt template")
    for t in templates:
        if t.count("{}") != 1:
            raise ValueError(f"template must contain exactly one '{{}}' placeholder: {t!r}")
    rows = []
    for variants in name_variants:
        if not variants:
            raise ValueError("empty name-variant list")
        prompts = [t.format(name) for name in variants for t in templates]
        emb = np.asarray(provider.embed_text(prompts), dtype=np.float64)
        if emb.shape[0] != len(prompts):
            raise ProviderError("text encoder returned the wrong number of embeddings")
        mean = emb.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0:
            raise ProviderError(f"prompt ensemble for {variants[0]!r} has zero norm")
        rows.append(mean / norm)
    names = list(class_names) if class_names is not None else [v[0] for v in name_variants]
    return ClassEmbeddingTable(
        embeddings=np.stack(rows),
        class_names=names,
        name_variants=[list(v) for v in name_variants],
        background_index=background_index,
        background_subclasses=list(background_subclasses) if background_subclasses else None,
    )


def generate_mask_proposals(provider: Provider, image: np.ndarray, grid_points: int, multimask: bool) -> list[RawMaskProposal]:
    if grid_points < 1:
        raise ValueError("grid_points must be >= 1")
    image = check_image(image)
    proposals = list(provider.mask_proposals(image, grid_points, multimask))
    for prop in proposals:
        if prop.mask.shape != image.shape[:2]:
            raise ProviderError(f"proposal mask {prop.mask.shape} does not match image {image.shape[:2]}")
    return proposals


def point_grid(n: int, height: int, width: int) -> np.ndarray:
    """Centres of an n x n uniform grid over the image, as (x, y) pixel coords."""
    offsets = (np.arange(n, dtype=np.float64) + 0.5) / n
    ys, xs = np.meshgrid(offsets * height, offsets * width, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)

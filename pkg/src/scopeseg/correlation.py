"""Similarity matrices, region-derived interaction masks and masked attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SIMILARITY_SOURCES
from .masks import RegionMaskSet
from .providers.base import FeatureGrid


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    source: str
    normalized: bool

    def __post_init__(self) -> None:
        if self.source not in SIMILARITY_SOURCES:
            raise ValueError(f"unknown similarity source {self.source!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError(f"similarity must be square, got {self.values.shape}")

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class InteractionMask:
    """Boolean semantic matrix ``E`` with its additive bias ``A`` (0 or -inf)."""

    E: np.ndarray

    def __post_init__(self) -> None:
        self.E = np.asarray(self.E, dtype=bool)
        if not np.all(np.diag(self.E)):
            raise ValueError("interaction mask must allow every patch to see itself")

    @property
    def A(self) -> np.ndarray:
        return np.where(self.E, 0.0, -np.inf)

    @classmethod
    def full(cls, n: int) -> InteractionMask:
        return cls(np.ones((n, n), dtype=bool))


def similarity(features: FeatureGrid | None, source: str, n: int | None = None, normalize: bool = True) -> SimilarityMatrix:
    """Pairwise patch similarity.

    With ``normalize`` the rows are L2-normalized first (cosine similarity);
    otherwise the raw inner product is returned. ``source="ones"`` ignores
    ``features`` and returns an all-ones matrix.
    """
    if source not in SIMILARITY_SOURCES:
        raise ValueError(f"unknown similarity source {source!r}")
    if source == "ones":
        if n is None:
            if features is None:
                raise ValueError("need n or features for the all-ones source")
            n = features.n
        return SimilarityMatrix(np.ones((n, n)), "ones", True)
    if features is None:
        raise ValueError(f"similarity source {source!r} needs a feature grid")
    if n is not None and n != features.n:
        raise ValueError(f"feature grid has {features.n} patches, expected {n}")
    x = np.asarray(features.data, dtype=np.float64)
    if normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        zero = np.flatnonzero(norms[:, 0] == 0)
        if zero.size:
            raise ValueError(
                f"cannot cosine-normalize {source}: {zero.size} zero-norm feature rows (first at patch {zero[0]})"
            )
        x = x / norms
    return SimilarityMatrix(x @ x.T, source, normalize)


def semantic_matrix(mask_set: RegionMaskSet, sim: SimilarityMatrix) -> InteractionMask:
    """Which patch pairs may attend to each other.

    Pairs inside one merged region always interact. Pairs with at least one
    unsegmented endpoint interact when their similarity is strictly above
    the mean of the whole matrix. Every patch sees itself.
    """
    if mask_set.patch_labels is None:
        raise ValueError("mask set has not been rasterized to patches")
    labels = mask_set.patch_labels
    if labels.shape[0] != sim.n:
        raise ValueError(f"mask set has {labels.shape[0]} patches, similarity is {sim.n}x{sim.n}")
    s = sim.values
    unseg = labels < 0
    either_unsegmented = unseg[:, None] | unseg[None, :]
    same_region = (labels[:, None] == labels[None, :]) & ~unseg[:, None]
    e = (either_unsegmented & (s > s.mean())) | same_region
    np.fill_diagonal(e, True)
    return InteractionMask(e)


def masked_attention(
    sim: SimilarityMatrix,
    mask: InteractionMask,
    mode: str = "value_recon",
    d: int | None = None,
    tau: float | None = None,
) -> np.ndarray:
    """Row-wise softmax of ``(S + A) / scale``.

    ``scope_only`` scales by ``sqrt(d)``; ``value_recon`` uses the
    temperature ``tau``. Masked entries come out exactly zero.
    """
    if mode == "scope_only":
        if d is None or d < 1:
            raise ValueError("scope_only attention needs d >= 1")
        scale = float(np.sqrt(d))
    elif mode == "value_recon":
        if tau is None or tau <= 0:
            raise ValueError("value_recon attention needs tau > 0")
        scale = float(tau)
    else:
        raise ValueError(f"unknown attention mode {mode!r}")
    e = mask.E
    if e.shape != sim.values.shape:
        raise ValueError("mask and similarity shapes differ")
    assert np.all(e.any(axis=1)), "a row has no admissible entries"
    logits = np.where(e, sim.values / scale, -np.inf)
    logits = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=1, keepdims=True)

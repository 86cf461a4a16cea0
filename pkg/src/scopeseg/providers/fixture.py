"""Archive-backed provider and a recorder that fills archives from any provider."""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path

import numpy as np

from .archive import TensorArchive
from .base import (
    ClipVisual,
    FeatureGrid,
    Projection,
    Provider,
    ProviderMissingError,
    RawMaskProposal,
    image_key,
    text_key,
)


class FixtureProvider:
    """Replays tensors stored in a :class:`TensorArchive`.

    Per-image tensors are looked up by a hash of the image array, so replay
    works for any window crop the original run touched.
    """

    def __init__(self, archive: TensorArchive):
        self.archive = archive
        if "model/patch_size" not in archive:
            raise ProviderMissingError("fixture archive lacks model/patch_size")
        self.patch_size = int(archive.get("model/patch_size")[0])
        self._proj: Projection | None = None

    @classmethod
    def from_path(cls, path: str | Path) -> FixtureProvider:
        return cls(TensorArchive.load(path))

    def _need(self, name: str, what: str) -> np.ndarray:
        if name not in self.archive:
            raise ProviderMissingError(f"provider missing: fixture has no {what} ({name})")
        return self.archive.get(name)

    def projection(self) -> Projection:
        if self._proj is None:
            fields = {n.split("/", 1)[1]: self.archive.get(n) for n in self.archive.names("proj/")}
            if "out_weight" not in fields:
                raise ProviderMissingError("provider missing: fixture has no projection (proj/out_weight)")
            self._proj = Projection.from_arrays(fields)
        return self._proj

    def clip_visual(self, image: np.ndarray) -> ClipVisual:
        key = image_key(image)
        grids = {}
        for part in ("q", "k", "v"):
            arr = self._need(f"clip/{key}/{part}", "CLIP features for this image")
            grids[part] = FeatureGrid.from_image(arr, f"clip_{part}")
        return ClipVisual(grids["q"], grids["k"], grids["v"], self.projection())

    def dino_qk(self, image: np.ndarray) -> FeatureGrid:
        arr = self._need(f"dino/{image_key(image)}/qk", "DINO features for this image")
        return FeatureGrid.from_image(arr, "dino_qk")

    def embed_text(self, prompts: Sequence[str]) -> np.ndarray:
        return np.stack([self._need(f"text/{text_key(p)}", f"text embedding for {p!r}") for p in prompts])

    def mask_proposals(self, image: np.ndarray, grid_points: int, multimask: bool) -> list[RawMaskProposal]:
        key = image_key(image)
        masks = self._need(f"sam/{key}/masks", "mask proposals for this image")
        scores = self._need(f"sam/{key}/scores", "mask proposal scores for this image")
        return [
            RawMaskProposal(masks[i].astype(bool), float(scores[i, 0]), float(scores[i, 1]))
            for i in range(masks.shape[0])
        ]


class RecordingProvider:
    """Wraps a provider and writes every output it produces into an archive."""

    def __init__(self, inner: Provider, archive: TensorArchive | None = None):
        self.inner = inner
        self.archive = archive if archive is not None else TensorArchive()
        self.patch_size = inner.patch_size
        self.archive.put("model/patch_size", np.array([inner.patch_size]), dtype="i32")

    def clip_visual(self, image: np.ndarray) -> ClipVisual:
        out = self.inner.clip_visual(image)
        key = image_key(image)
        for part in ("q", "k", "v"):
            self.archive.put(f"clip/{key}/{part}", getattr(out, part).as_image())
        if "proj/out_weight" not in self.archive:
            for name, arr in out.proj.to_arrays().items():
                self.archive.put(f"proj/{name}", arr)
        # Hand back exactly what a replay will see.
        return self._as_stored(out, key)

    def _as_stored(self, out: ClipVisual, key: str) -> ClipVisual:
        grids = [FeatureGrid.from_image(self.archive.get(f"clip/{key}/{p}"), f"clip_{p}") for p in "qkv"]
        proj = Projection.from_arrays({n.split("/", 1)[1]: self.archive.get(n) for n in self.archive.names("proj/")})
        return ClipVisual(grids[0], grids[1], grids[2], proj)

    def dino_qk(self, image: np.ndarray) -> FeatureGrid:
        grid = self.inner.dino_qk(image)
        name = f"dino/{image_key(image)}/qk"
        self.archive.put(name, grid.as_image())
        return FeatureGrid.from_image(self.archive.get(name), "dino_qk")

    def embed_text(self, prompts: Sequence[str]) -> np.ndarray:
        emb = np.asarray(self.inner.embed_text(prompts))
        for prompt, row in zip(prompts, emb):
            self.archive.put(f"text/{text_key(prompt)}", row, meta={"prompt": prompt})
        return np.stack([self.archive.get(f"text/{text_key(p)}") for p in prompts])

    def mask_proposals(self, image: np.ndarray, grid_points: int, multimask: bool) -> list[RawMaskProposal]:
        props = self.inner.mask_proposals(image, grid_points, multimask)
        key = image_key(image)
        h, w = image.shape[:2]
        masks = np.stack([p.mask for p in props]) if props else np.zeros((0, h, w), dtype=bool)
        scores = np.array([[p.predicted_iou, p.stability_score] for p in props], dtype=np.float64).reshape(-1, 2)
        meta = {"grid_points": grid_points, "multimask": bool(multimask)}
        self.archive.put(f"sam/{key}/masks", masks, dtype="u8", meta=meta)
        self.archive.put(f"sam/{key}/scores", scores)
        stored = self.archive.get(f"sam/{key}/scores")
        return [
            RawMaskProposal(p.mask, float(stored[i, 0]), float(stored[i, 1])) for i, p in enumerate(props)
        ]

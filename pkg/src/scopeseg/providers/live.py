"""Provider backed by transformers CLIP, DINO (ViT) and SAM 2 models.

Models load lazily on first use so a run that never needs SAM (e.g.
``mask_source: none``) never touches its weights. Requires the ``live``
extra (torch + transformers).
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from typing import Any

import numpy as np

from .base import ClipVisual, FeatureGrid, Projection, ProviderMissingError, RawMaskProposal, point_grid

log = logging.getLogger(__name__)

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _first_attr(obj: Any, *paths: str) -> Any:
    """Resolve the first dotted attribute path that exists (module names drift across versions)."""
    for path in paths:
        cur = obj
        try:
            for part in path.split("."):
                cur = cur[int(part)] if part.lstrip("-").isdigit() else getattr(cur, part)
        except (AttributeError, IndexError, TypeError):
            continue
        return cur
    raise AttributeError(f"none of {paths} found on {type(obj).__name__}")


def _np(t: Any) -> np.ndarray:
    return t.detach().to("cpu").float().numpy()


class LiveProvider:
    def __init__(
        self,
        clip_model: Any = None,
        tokenizer: Callable | None = None,
        dino_model: Any = None,
        sam_model: Any = None,
        sam_processor: Any = None,
        patch_size: int | None = None,
        device: str = "cpu",
        loaders: dict[str, Callable[[], Any]] | None = None,
        sam_points_per_batch: int = 64,
    ):
        import torch

        self._torch = torch
        self.device = torch.device(device)
        self._models: dict[str, Any] = {
            "clip": clip_model,
            "tokenizer": tokenizer,
            "dino": dino_model,
            "sam": sam_model,
            "sam_processor": sam_processor,
        }
        self._loaders = loaders or {}
        self.sam_points_per_batch = sam_points_per_batch
        if patch_size is None:
            if clip_model is None:
                raise ValueError("patch_size is required when the CLIP model loads lazily")
            patch_size = int(clip_model.config.vision_config.patch_size)
        self.patch_size = patch_size

    @classmethod
    def from_config(cls, cfg) -> LiveProvider:
        try:
            import torch  # noqa: F401
            import transformers
        except ImportError as exc:
            raise ProviderMissingError(
                "provider 'live' needs torch and transformers (pip install 'artifact[live]'); "
                "or set the 'provider' config key to fixture:<path>"
            ) from exc

        def load(key: str, what: str, fn: Callable[[], Any]) -> Callable[[], Any]:
            def wrapped() -> Any:
                try:
                    return fn()
                except Exception as exc:  # noqa: BLE001 - surface any hub/IO failure with the config key
                    raise ProviderMissingError(
                        f"could not load {what}: {exc}. Check the '{key}' config key, "
                        "or replay a fixture archive with provider: fixture:<path>"
                    ) from exc
            return wrapped

        loaders = {
            "clip": load("clip_model", f"CLIP model {cfg.clip_model_id!r}",
                         lambda: transformers.CLIPModel.from_pretrained(cfg.clip_model_id)),
            "tokenizer": load("clip_model", f"CLIP tokenizer {cfg.clip_model_id!r}",
                              lambda: transformers.AutoTokenizer.from_pretrained(cfg.clip_model_id)),
            "dino": load("dino_model", f"DINO model {cfg.dino_model!r}",
                         lambda: transformers.ViTModel.from_pretrained(cfg.dino_model, add_pooling_layer=False)),
            "sam": load("sam_model", f"SAM model {cfg.sam_model!r}",
                        lambda: transformers.Sam2Model.from_pretrained(cfg.sam_model)),
            "sam_processor": load("sam_model", f"SAM processor {cfg.sam_model!r}",
                                  lambda: transformers.Sam2Processor.from_pretrained(cfg.sam_model)),
        }
        return cls(patch_size=cfg.patch_size, device=cfg.device, loaders=loaders)

    def _get(self, name: str) -> Any:
        model = self._models.get(name)
        if model is None:
            if name not in self._loaders:
                raise ProviderMissingError(f"provider missing: no {name} model configured")
            model = self._loaders[name]()
            if hasattr(model, "to"):
                model = model.to(self.device).eval()
            self._models[name] = model
        return model

    def _pixels(self, image: np.ndarray, mean: Sequence[float], std: Sequence[float]):
        torch = self._torch
        x = np.asarray(image, dtype=np.float32) / 255.0
        x = (x - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
        return torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))[None].to(self.device)

    def _last_block_input(self, model: Any, norm_module: Any, pixel_values: Any) -> Any:
        """Output of the final block's pre-attention LayerNorm (batch 0)."""
        captured = {}
        handle = norm_module.register_forward_hook(lambda m, i, o: captured.__setitem__("x", o))
        try:
            with self._torch.no_grad():
                model(pixel_values=pixel_values, interpolate_pos_encoding=True)
        finally:
            handle.remove()
        return captured["x"][0]

    def clip_visual(self, image: np.ndarray) -> ClipVisual:
        clip = self._get("clip")
        vision = clip.vision_model
        block = _first_attr(vision, "encoder.layers.-1", "encoder.layer.-1")
        x = self._last_block_input(vision, block.layer_norm1, self._pixels(image, CLIP_MEAN, CLIP_STD))
        x = x[1:]  # drop the class token
        attn = block.self_attn
        rows, cols = image.shape[0] // self.patch_size, image.shape[1] // self.patch_size
        with self._torch.no_grad():
            q, k, v = (_np(attn.q_proj(x)), _np(attn.k_proj(x)), _np(attn.v_proj(x)))
        ln = vision.post_layernorm
        proj = Projection(
            out_weight=_np(attn.out_proj.weight),
            out_bias=_np(attn.out_proj.bias) if attn.out_proj.bias is not None else None,
            ln_weight=_np(ln.weight),
            ln_bias=_np(ln.bias),
            ln_eps=float(ln.eps),
            text_weight=_np(clip.visual_projection.weight),
        )
        grid = lambda a, tag: FeatureGrid(a, rows, cols, tag)  # noqa: E731
        return ClipVisual(grid(q, "clip_q"), grid(k, "clip_k"), grid(v, "clip_v"), proj)

    def dino_qk(self, image: np.ndarray) -> FeatureGrid:
        dino = self._get("dino")
        block = _first_attr(dino, "layers.-1", "encoder.layer.-1", "encoder.layers.-1")
        x = self._last_block_input(dino, block.layernorm_before, self._pixels(image, IMAGENET_MEAN, IMAGENET_STD))
        p = int(dino.config.patch_size)
        rows, cols = image.shape[0] // p, image.shape[1] // p
        x = x[x.shape[0] - rows * cols:]  # patch tokens follow the class (and any register) tokens
        q_proj = _first_attr(block, "attention.q_proj", "attention.attention.query")
        k_proj = _first_attr(block, "attention.k_proj", "attention.attention.key")
        with self._torch.no_grad():
            qk = _np(q_proj(x) + k_proj(x))
        return FeatureGrid(qk, rows, cols, "dino_qk")

    def embed_text(self, prompts: Sequence[str]) -> np.ndarray:
        clip = self._get("clip")
        tokenizer = self._get("tokenizer")
        out = []
        for start in range(0, len(prompts), 256):
            tokens = tokenizer(list(prompts[start:start + 256]), padding=True, return_tensors="pt")
            tokens = {k: v.to(self.device) for k, v in tokens.items()}
            with self._torch.no_grad():
                feats = clip.get_text_features(**tokens)
            if not isinstance(feats, self._torch.Tensor):
                feats = feats.pooler_output
            out.append(_np(feats))
        return np.concatenate(out, axis=0)

    def mask_proposals(self, image: np.ndarray, grid_points: int, multimask: bool) -> list[RawMaskProposal]:
        """Prompt SAM with a point grid; stability uses the +/-1 logit offset rule."""
        torch = self._torch
        sam = self._get("sam")
        processor = self._get("sam_processor")
        h, w = image.shape[:2]
        inputs = processor(images=np.asarray(image), return_tensors="pt")
        with torch.no_grad():
            embeddings = sam.get_image_embeddings(inputs["pixel_values"].to(self.device))
        points = point_grid(grid_points, h, w)
        proposals: list[RawMaskProposal] = []
        for start in range(0, len(points), self.sam_points_per_batch):
            batch = points[start:start + self.sam_points_per_batch]
            prompt = processor(
                input_points=[[[p.tolist()] for p in batch]],
                input_labels=[[[1] for _ in batch]],
                original_sizes=[[h, w]],
                return_tensors="pt",
            )
            with torch.no_grad():
                out = sam(
                    input_points=prompt["input_points"].to(self.device),
                    input_labels=prompt["input_labels"].to(self.device),
                    image_embeddings=embeddings,
                    multimask_output=multimask,
                )
            logits = processor.post_process_masks(out.pred_masks.cpu(), [[h, w]], binarize=False)[0]
            ious = _np(out.iou_scores[0])
            logits = logits.float()
            inter = (logits > 1.0).flatten(-2).sum(-1).float()
            union = (logits > -1.0).flatten(-2).sum(-1).float()
            stability = _np(torch.where(union > 0, inter / union.clamp(min=1), torch.zeros_like(union)))
            masks = (logits > 0.0).numpy()
            for i in range(masks.shape[0]):
                for j in range(masks.shape[1]):
                    if masks[i, j].any():
                        proposals.append(RawMaskProposal(
                            masks[i, j],
                            float(np.clip(ious[i, j], 0.0, 1.0)),
                            float(np.clip(stability[i, j], 0.0, 1.0)),
                        ))
        log.debug("SAM produced %d proposals from %d points", len(proposals), len(points))
        return proposals

"""Live provider wrappers exercised with tiny randomly initialised models (no downloads)."""

from __future__ import annotations

import numpy as np
import pytest

torch = pytest.importorskip("torch")
transformers = pytest.importorskip("transformers")

from scopeseg.config import PipelineConfig  # noqa: E402
from scopeseg.pipeline import build_classes, segment_image  # noqa: E402
from scopeseg.providers import (  # noqa: E402
    FixtureProvider,
    ProviderMissingError,
    RecordingProvider,
    TensorArchive,
    extract_clip_visual,
    extract_dino_qk,
)
from scopeseg.providers.live import LiveProvider  # noqa: E402

pytestmark = pytest.mark.live


class ToyTokenizer:
    """Byte-level ids; enough to drive a randomly initialised text tower."""

    def __call__(self, prompts, padding=True, return_tensors="pt"):
        ids = [[1] + [2 + (b % 90) for b in p.encode()][:14] + [99] for p in prompts]
        width = max(len(i) for i in ids)
        input_ids = torch.tensor([i + [0] * (width - len(i)) for i in ids])
        mask = torch.tensor([[1] * len(i) + [0] * (width - len(i)) for i in ids])
        return {"input_ids": input_ids, "attention_mask": mask}


@pytest.fixture(scope="module")
def tiny_models():
    torch.manual_seed(0)
    clip_cfg = transformers.CLIPConfig(
        text_config=dict(vocab_size=100, hidden_size=32, intermediate_size=64, num_hidden_layers=2,
                         num_attention_heads=4, max_position_embeddings=32, eos_token_id=99),
        vision_config=dict(image_size=64, patch_size=16, hidden_size=32, intermediate_size=64,
                           num_hidden_layers=2, num_attention_heads=4),
        projection_dim=16,
    )
    clip = transformers.CLIPModel(clip_cfg).eval()
    dino = transformers.ViTModel(
        transformers.ViTConfig(image_size=32, patch_size=4, hidden_size=24, intermediate_size=48,
                               num_hidden_layers=2, num_attention_heads=4),
        add_pooling_layer=False,
    ).eval()
    return clip, dino


def _image(h=64, w=80, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)


def test_clip_extraction_shapes(tiny_models):
    clip, dino = tiny_models
    prov = LiveProvider(clip_model=clip, tokenizer=ToyTokenizer(), dino_model=dino)
    out = extract_clip_visual(prov, _image(), 16)
    assert out.q.shape == (4, 5) and out.v.dim == 32
    assert out.proj.out_dim == 16


def test_clip_extraction_matches_manual_forward(tiny_models):
    clip, _ = tiny_models
    prov = LiveProvider(clip_model=clip, tokenizer=ToyTokenizer())
    img = _image(64, 64)
    out = prov.clip_visual(img)
    pixels = prov._pixels(img, (0.48145466, 0.4578275, 0.40821073), (0.26862954, 0.26130258, 0.27577711))
    with torch.no_grad():
        hidden = clip.vision_model(pixel_values=pixels, output_hidden_states=True).hidden_states[-2][0]
        block = clip.vision_model.encoder.layers[-1]
        x = block.layer_norm1(hidden)[1:]
        v = block.self_attn.v_proj(x).numpy()
    np.testing.assert_allclose(out.v.data, v, atol=1e-5)


def test_dino_extraction_resampled(tiny_models):
    clip, dino = tiny_models
    prov = LiveProvider(clip_model=clip, tokenizer=ToyTokenizer(), dino_model=dino)
    native = prov.dino_qk(_image())
    assert native.shape == (16, 20)
    assert extract_dino_qk(prov, _image(), (4, 5)).shape == (4, 5)


def test_text_embeddings(tiny_models):
    clip, _ = tiny_models
    prov = LiveProvider(clip_model=clip, tokenizer=ToyTokenizer())
    emb = prov.embed_text(["a photo of a cat.", "a photo of a dog."])
    assert emb.shape == (2, 16) and np.all(np.isfinite(emb))


def test_end_to_end_record_replay_identical(tiny_models):
    clip, dino = tiny_models
    prov = LiveProvider(clip_model=clip, tokenizer=ToyTokenizer(), dino_model=dino)
    cfg = PipelineConfig(provider="live", templates="single", mask_source="groundtruth", nc=False,
                         window=48, stride=16, resize_short=None)
    img = _image(64, 80)
    gt = np.zeros((64, 80), np.int64)
    gt[:, 40:] = 1
    classes = ["cat", "dog"]

    archive = TensorArchive()
    rec = RecordingProvider(prov, archive)
    live = segment_image(img, rec, build_classes(rec, classes, cfg), cfg, gt=gt).seg.labels
    replay_prov = FixtureProvider(archive)
    replay = segment_image(img, replay_prov, build_classes(replay_prov, classes, cfg), cfg, gt=gt).seg.labels
    assert live.tobytes() == replay.tobytes()


def test_lazy_loading_failure_names_config_key():
    cfg = PipelineConfig(clip_model="/nonexistent/clip-model", templates="single")
    prov = LiveProvider.from_config(cfg)
    with pytest.raises(ProviderMissingError, match="clip_model"):
        prov.embed_text(["x"])


def test_sam_proposals_from_random_model():
    sam = transformers.Sam2Model(transformers.Sam2Config()).eval()
    processor = transformers.Sam2Processor(image_processor=transformers.Sam2ImageProcessor())
    prov = LiveProvider(sam_model=sam, sam_processor=processor, patch_size=16)
    props = prov.mask_proposals(_image(64, 80), 1, True)
    assert len(props) <= 3
    for p in props:
        assert p.mask.shape == (64, 80)
        assert 0.0 <= p.predicted_iou <= 1.0 and 0.0 <= p.stability_score <= 1.0

"""Acceptance gate: one test per criterion, each at its stated tolerance.

A summary line per criterion is printed at the end of the pytest run (see
``pytest_terminal_summary`` in conftest.py).
"""

from __future__ import annotations

import time

import numpy as np
import pytest
from conftest import CLASSES, NOISY, NOISY_CLASSES, synthetic_cfg
from PIL import Image

from scopeseg.cli import main
from scopeseg.correction import mode_correct
from scopeseg.correlation import SimilarityMatrix, masked_attention, semantic_matrix
from scopeseg.evaluation import ConfusionAccumulator, miou, update
from scopeseg.masks import (
    UNSEGMENTED,
    RegionMaskSet,
    cosine_distances,
    dbscan,
    merge_regions,
    rasterize_to_patches,
    region_features,
    threshold_and_flatten,
)
from scopeseg.pipeline import build_classes, segment_image
from scopeseg.providers import FixtureProvider, RecordingProvider, TensorArchive
from scopeseg.providers.base import FeatureGrid, RawMaskProposal
from scopeseg.providers.synthetic import SyntheticProvider, make_scene

# ---------------------------------------------------------------- oracles


def _random_patch_labels(rng, n):
    """Merged region ids 0..z-1 for n patches, some left unsegmented (-1)."""
    z = int(rng.integers(0, min(n, 5) + 1))
    labels = rng.integers(-1, z, n) if z else np.full(n, -1)
    present = np.unique(labels[labels >= 0])
    return np.where(labels >= 0, np.searchsorted(present, np.clip(labels, 0, None)), -1)


def _patch_set(labels):
    z = int(labels.max()) + 1 if (labels >= 0).any() else 0
    return RegionMaskSet(labels[None, :], [(i,) for i in range(z)], patch_labels=labels,
                         grid=(1, len(labels)), merged=True)


def _eq6_termwise(labels, s):
    """Broadcast-sum expression evaluated entry by entry, then binarized."""
    n = len(labels)
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += s[i][j]
    mean = total / (n * n)
    e = [[False] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            m0_i = 1 if labels[i] == UNSEGMENTED else 0
            m0_j = 1 if labels[j] == UNSEGMENTED else 0
            above = 1 if s[i][j] > mean else 0
            raw = (m0_i * 1 + 1 * m0_j) * above
            for r in range(int(max(labels)) + 1):
                raw += (1 if labels[i] == r else 0) * (1 if labels[j] == r else 0)
            e[i][j] = raw > 0 or i == j
    return np.array(e)


def _closure_components(x, eps):
    n = len(x)
    d = cosine_distances(x)
    reach = [[d[i][j] <= eps for j in range(n)] for i in range(n)]
    for k in range(n):
        for i in range(n):
            for j in range(n):
                reach[i][j] = reach[i][j] or (reach[i][k] and reach[k][j])
    return reach


def _naive_iou(pairs, k, ignore=255):
    inter = [0] * k
    union = [0] * k
    for pred, gt in pairs:
        for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
            if g == ignore:
                continue
            for c in range(k):
                a, b = p == c, g == c
                inter[c] += a and b
                union[c] += a or b
    return inter, union


def _dataset_miou(provider, classes, scenes, cfg, use_raw=True):
    setup = build_classes(provider, classes, cfg)
    acc = ConfusionAccumulator(len(classes))
    for scene in scenes:
        out = segment_image(scene.image, provider, setup, cfg)
        update(acc, (out.raw if use_raw else out.seg).labels, scene.labels)
    return miou(acc)


# ---------------------------------------------------------------- criteria


def test_c1_semantic_matrix_oracle():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    for _ in range(200):
        n = int(rng.integers(1, 17))
        labels = _random_patch_labels(rng, n)
        kind = rng.integers(0, 3)
        if kind == 0:
            s = rng.uniform(-1, 1, (n, n))
        elif kind == 1:
            x = rng.standard_normal((n, 4))
            x /= np.linalg.norm(x, axis=1, keepdims=True)
            s = x @ x.T
        else:
            s = rng.integers(0, 3, (n, n)).astype(float)  # ties against the mean
        got = semantic_matrix(_patch_set(labels), SimilarityMatrix(s, "dino_qk", False)).E
        np.testing.assert_array_equal(got, _eq6_termwise(labels.tolist(), s.tolist()))
    assert time.perf_counter() - start < 10.0


def test_c2_masked_attention_contract():
    rng = np.random.default_rng(202)
    for _ in range(200):
        n = int(rng.integers(1, 17))
        labels = _random_patch_labels(rng, n)
        s = SimilarityMatrix(rng.uniform(-1, 1, (n, n)) * rng.choice([1.0, 10.0, 100.0]), "clip_qq", False)
        mask = semantic_matrix(_patch_set(labels), s)
        for mode in ("scope_only", "value_recon"):
            attn = masked_attention(s, mask, mode, d=int(rng.integers(1, 1025)), tau=0.25)
            assert np.all(np.abs(attn.sum(axis=1) - 1.0) <= 1e-6)
            assert np.all(attn[~mask.E] == 0.0)
    s = np.array([[1.0, 0.5, 0.3], [0.5, 1.0, 0.3], [0.3, 0.3, 1.0]])
    e = np.array([[True, True, False], [True, True, False], [False, False, True]])
    from scopeseg.correlation import InteractionMask

    attn = masked_attention(SimilarityMatrix(s, "dino_qk", True), InteractionMask(e), "value_recon", tau=0.25)
    assert np.round(attn[0], 4).tolist() == [0.8808, 0.1192, 0.0]


def test_c3_dbscan_equivalence():
    cluster = pytest.importorskip("sklearn.cluster")
    rng = np.random.default_rng(303)
    for _ in range(500):
        z = int(rng.integers(1, 13))
        x = rng.standard_normal((z, int(rng.integers(2, 6))))
        if rng.random() < 0.3:  # near-duplicate groups
            x = x[rng.integers(0, max(1, z // 2), z)] + 0.05 * rng.standard_normal(x.shape)
        eps = float(rng.uniform(0.0, 0.5))
        labels = dbscan(x, eps, 1)
        reach = _closure_components(x, eps)
        for i in range(z):
            for j in range(z):
                assert (labels[i] == labels[j]) == reach[i][j]
    for min_samples in (2, 3):
        for _ in range(100):
            z = int(rng.integers(1, 13))
            x = rng.standard_normal((z, 3))
            eps = float(rng.uniform(0.05, 0.6))
            ours = dbscan(x, eps, min_samples)
            ref = cluster.DBSCAN(eps=eps, min_samples=min_samples, metric="cosine", algorithm="brute").fit(x).labels_
            np.testing.assert_array_equal(ours, ref)


def test_c4_mask_algebra():
    rng = np.random.default_rng(404)
    for _ in range(100):
        rows, cols, px = int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.choice([2, 4, 8]))
        h, w = rows * px, cols * px
        props = []
        for _ in range(int(rng.integers(0, 12))):
            m = np.zeros((h, w), bool)
            t, l = rng.integers(0, h), rng.integers(0, w)
            m[t:t + rng.integers(1, h + 1), l:l + rng.integers(1, w + 1)] = True
            props.append(RawMaskProposal(m, float(rng.uniform(0.5, 1.0)), float(rng.uniform(0.5, 1.0))))
        flat = threshold_and_flatten(props, 0.7, 0.7, (h, w))
        raster = rasterize_to_patches(flat, (rows, cols), px)
        feats = FeatureGrid(rng.standard_normal((rows * cols, 4)), rows, cols, "dino_qk")
        merged = merge_regions(raster, region_features(raster, feats), float(rng.uniform(0, 0.5)), int(rng.integers(0, 4)))
        for ms in (flat, raster, merged):
            pm = ms.pixel_masks
            assert np.all(pm.sum(axis=0) + ms.unsegmented_pixel == 1)
            assert all(not np.any(pm[a] & pm[b]) for a in range(ms.z) for b in range(a + 1, ms.z))
        for ms in (raster, merged):
            pt = ms.patch_masks
            np.testing.assert_array_equal(pt.sum(axis=0) + ms.unsegmented_patch, np.ones(rows * cols))
            assert np.all(pt.sum(axis=1) > 0)
        assert merged.z <= raster.z
        np.testing.assert_array_equal(merged.unsegmented_pixel, raster.unsegmented_pixel)


def test_c5_clean_synthetic_soundness():
    rng = np.random.default_rng(505)
    prov = SyntheticProvider(CLASSES)
    cfg = synthetic_cfg()
    setup = build_classes(prov, CLASSES, cfg)
    for h, w in [(336, 448), (448, 336), (336, 336), (336, 560)]:
        scene = make_scene(rng, h, w, len(CLASSES))
        out = segment_image(scene.image, prov, setup, cfg)
        acc = update(ConfusionAccumulator(len(CLASSES)), out.raw.labels, scene.labels)
        assert miou(acc) == 1.0
        np.testing.assert_array_equal(out.seg.labels, out.raw.labels)
        again = mode_correct(out.seg, out.regions)
        np.testing.assert_array_equal(again.labels, out.seg.labels)


def test_c6_ablation_monotonicity():
    prov = SyntheticProvider(NOISY_CLASSES, noise=NOISY)
    rng = np.random.default_rng(1)
    scenes = [make_scene(rng, 336, 448, len(NOISY_CLASSES)) for _ in range(4)]
    base = synthetic_cfg(mc=False)
    baseline = _dataset_miou(prov, NOISY_CLASSES, scenes, base.replace(sr=False, vr=False))
    sr = _dataset_miou(prov, NOISY_CLASSES, scenes, base.replace(sr=True, vr=False))
    sr_vr = _dataset_miou(prov, NOISY_CLASSES, scenes, base.replace(sr=True, vr=True))
    print(f"baseline {baseline:.4f}  +SR {sr:.4f}  +SR+VR {sr_vr:.4f}")
    assert sr > baseline
    assert sr_vr > sr


def test_c7_miou_oracle():
    rng = np.random.default_rng(707)
    for _ in range(100):
        k = int(rng.integers(1, 6))
        h, w = int(rng.integers(1, 12)), int(rng.integers(1, 12))
        pred = rng.integers(0, k, (h, w))
        gt = np.where(rng.random((h, w)) < 0.15, 255, rng.integers(0, k, (h, w)))
        acc = update(ConfusionAccumulator(k), pred, gt)
        inter, union = _naive_iou([(pred, gt)], k)
        assert acc.intersection.tolist() == inter and acc.union.tolist() == union
        seen = [c for c in range(k) if union[c] > 0]
        if seen:
            assert miou(acc) == float(np.mean([inter[c] / union[c] for c in seen]))
    pred = np.zeros((4, 4), int)
    pred[:2] = 1
    gt = np.zeros((4, 4), int)
    gt[1, :] = 1
    gt[2, :2] = 1
    assert update(ConfusionAccumulator(2), pred, gt).iou()[1] == pytest.approx(0.4)


def test_c8_replay_determinism_cli(tmp_path):
    scene = make_scene(np.random.default_rng(808), 336, 448, len(CLASSES))
    path = tmp_path / "scene.png"
    Image.fromarray(scene.image).save(path)
    classes = ",".join(CLASSES)
    common = ["--templates", "single"]
    assert main(["extract", str(path), "--classes", classes, "--out", str(tmp_path / "arc"),
                 "--provider", "synthetic", *common]) == 0
    assert main(["segment", str(path), "--classes", classes, "--out", str(tmp_path / "live"),
                 "--provider", "synthetic", *common]) == 0
    for run in ("r1", "r2"):
        assert main(["segment", str(path), "--classes", classes, "--out", str(tmp_path / run),
                     "--provider", f"fixture:{tmp_path / 'arc'}", *common]) == 0
    live = np.asarray(Image.open(tmp_path / "live.labels.png"))
    r1 = np.asarray(Image.open(tmp_path / "r1.labels.png"))
    r2 = np.asarray(Image.open(tmp_path / "r2.labels.png"))
    assert live.tobytes() == r1.tobytes() == r2.tobytes()
    ref = TensorArchive.load(tmp_path / "arc").get("reference/labels")
    assert ref.astype(np.uint8).tobytes() == live.tobytes()


def test_c8_replay_determinism_transformers_models():
    torch = pytest.importorskip("torch")
    transformers = pytest.importorskip("transformers")
    from test_live import ToyTokenizer

    from scopeseg.providers.live import LiveProvider

    torch.manual_seed(8)
    clip = transformers.CLIPModel(transformers.CLIPConfig(
        text_config=dict(vocab_size=100, hidden_size=32, intermediate_size=64, num_hidden_layers=2,
                         num_attention_heads=4, max_position_embeddings=32, eos_token_id=99),
        vision_config=dict(image_size=64, patch_size=16, hidden_size=32, intermediate_size=64,
                           num_hidden_layers=2, num_attention_heads=4),
        projection_dim=16,
    )).eval()
    dino = transformers.ViTModel(transformers.ViTConfig(
        image_size=32, patch_size=8, hidden_size=24, intermediate_size=48, num_hidden_layers=2,
        num_attention_heads=4), add_pooling_layer=False).eval()
    live = LiveProvider(clip_model=clip, tokenizer=ToyTokenizer(), dino_model=dino)
    cfg = synthetic_cfg(provider="live", mask_source="groundtruth", window=64, stride=32)
    image = np.random.default_rng(8).integers(0, 256, (64, 96, 3), dtype=np.uint8)
    gt = np.zeros((64, 96), np.int64)
    gt[:, 48:] = 1
    archive = TensorArchive()
    rec = RecordingProvider(live, archive)
    first = segment_image(image, rec, build_classes(rec, ["cat", "dog"], cfg), cfg, gt=gt).seg.labels
    replay = FixtureProvider(archive)
    second = segment_image(image, replay, build_classes(replay, ["cat", "dog"], cfg), cfg, gt=gt).seg.labels
    assert first.tobytes() == second.tobytes()


@pytest.mark.skip(reason="needs pretrained CLIP/DINO/SAM weights and the Pascal VOC 2012 val set, "
                         "neither of which is available offline")
def test_c9_scaled_voc_reproduction():
    pass

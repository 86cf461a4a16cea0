from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scopeseg.correlation import InteractionMask, SimilarityMatrix, masked_attention, semantic_matrix, similarity
from scopeseg.masks import UNSEGMENTED, RegionMaskSet
from scopeseg.providers.base import FeatureGrid


def patch_set(patch_labels) -> RegionMaskSet:
    """A rasterized set whose pixels are its patches (1 px per patch)."""
    pl = np.asarray(patch_labels, dtype=np.int32)
    z = int(pl.max()) + 1 if (pl >= 0).any() else 0
    return RegionMaskSet(pl[None, :], [(i,) for i in range(z)], patch_labels=pl, grid=(1, len(pl)))


def eq6_oracle(patch_labels, s) -> np.ndarray:
    """Literal broadcast-sum form: (m0 1^T + 1 m0^T) * [S > mean] + sum_i m_i m_i^T, then > 0."""
    pl = np.asarray(patch_labels)
    n = len(pl)
    m0 = (pl == UNSEGMENTED).astype(np.int64)
    ones = np.ones(n, dtype=np.int64)
    above = (s > s.mean()).astype(np.int64)
    raw = (np.outer(m0, ones) + np.outer(ones, m0)) * above
    for r in range(int(pl.max(initial=-1)) + 1):
        mi = (pl == r).astype(np.int64)
        raw = raw + np.outer(mi, mi)
    e = raw > 0
    np.fill_diagonal(e, True)
    return e


# ---------------------------------------------------------------- similarity

def test_ones_source():
    s = similarity(None, "ones", 4)
    np.testing.assert_array_equal(s.values, np.ones((4, 4)))


def test_cosine_diagonal_is_one(rng):
    s = similarity(FeatureGrid(rng.standard_normal((9, 5)), 3, 3, "clip_q"), "clip_qq")
    np.testing.assert_allclose(np.diag(s.values), 1.0, atol=1e-5)
    np.testing.assert_allclose(s.values, s.values.T, atol=1e-5)
    assert np.all(np.abs(s.values) <= 1 + 1e-12)


def test_hand_cosines():
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    s = similarity(FeatureGrid(x, 1, 3, "dino_qk"), "dino_qk").values
    r = 1 / np.sqrt(2)
    np.testing.assert_allclose(s, [[1, 0, r], [0, 1, r], [r, r, 1]])


def test_raw_dot_product_when_not_normalized():
    x = np.array([[2.0, 0.0], [1.0, 1.0]])
    s = similarity(FeatureGrid(x, 1, 2, "clip_q"), "clip_qq", normalize=False)
    np.testing.assert_allclose(s.values, x @ x.T)
    assert not s.normalized


def test_zero_norm_row_rejected():
    x = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(ValueError, match="zero-norm"):
        similarity(FeatureGrid(x, 1, 2, "clip_q"), "clip_qq")


def test_unknown_source_rejected():
    with pytest.raises(ValueError):
        similarity(None, "foo", 2)


# ---------------------------------------------------------------- semantic matrix

def test_single_region_all_true():
    e = semantic_matrix(patch_set([0, 0, 0, 0]), SimilarityMatrix(np.eye(4), "clip_qq", True)).E
    assert e.all()


def test_all_unsegmented_with_ones_is_identity():
    e = semantic_matrix(patch_set([-1] * 5), similarity(None, "ones", 5)).E
    np.testing.assert_array_equal(e, np.eye(5, dtype=bool))


def test_hand_four_patch_case():
    s = np.full((4, 4), 0.2)
    np.fill_diagonal(s, 1.0)
    s[2, 3] = s[3, 2] = 0.9
    s[0, 2] = s[2, 0] = -0.5
    labels = [0, 0, -1, -1]
    e = semantic_matrix(patch_set(labels), SimilarityMatrix(s, "clip_qq", True)).E
    assert e[0, 1] and e[2, 3] and not e[0, 2]
    np.testing.assert_array_equal(e, eq6_oracle(labels, s))


def test_different_regions_never_interact(rng):
    s = SimilarityMatrix(np.ones((4, 4)) * 5, "clip_qq", False)
    e = semantic_matrix(patch_set([0, 0, 1, 1]), s).E
    assert not e[0, 2] and not e[1, 3]


def test_bias_matches_mask():
    m = InteractionMask(np.array([[True, False], [False, True]]))
    np.testing.assert_array_equal(m.A, [[0.0, -np.inf], [-np.inf, 0.0]])


def test_interaction_mask_requires_diagonal():
    with pytest.raises(ValueError):
        InteractionMask(np.zeros((2, 2), bool))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_region_order_invariance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 17))
    z = int(rng.integers(1, 5))
    labels = rng.integers(-1, z, n)
    s = SimilarityMatrix(rng.standard_normal((n, n)), "clip_qq", False)
    perm = rng.permutation(z)
    relabelled = np.where(labels >= 0, perm[np.clip(labels, 0, None)], -1)
    # compact the permuted labels so region ids stay contiguous
    a = semantic_matrix(patch_set(np.unique(labels, return_inverse=True)[1] - (labels.min() < 0)), s).E
    b = semantic_matrix(patch_set(np.unique(relabelled, return_inverse=True)[1] - (relabelled.min() < 0)), s).E
    np.testing.assert_array_equal(a, b)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_splitting_a_region_never_adds_interactions(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 17))
    labels = rng.integers(-1, 3, n)
    labels[0] = 0
    s = SimilarityMatrix(rng.standard_normal((n, n)), "clip_qq", False)
    split = labels.copy()
    members = np.flatnonzero(labels == 0)
    split[members[rng.random(members.size) < 0.5]] = labels.max() + 1
    before = semantic_matrix(patch_set(np.unique(labels, return_inverse=True)[1] - (labels.min() < 0)), s).E
    after = semantic_matrix(patch_set(np.unique(split, return_inverse=True)[1] - (split.min() < 0)), s).E
    assert not np.any(after & ~before)


# ---------------------------------------------------------------- masked attention

def test_uniform_when_all_allowed_and_constant():
    s = SimilarityMatrix(np.full((5, 5), 0.3), "clip_qq", True)
    attn = masked_attention(s, InteractionMask.full(5), "value_recon", tau=0.25)
    np.testing.assert_allclose(attn, 0.2)


def test_diagonal_only_row_is_one_hot():
    e = np.eye(3, dtype=bool)
    e[1, :] = True
    e[:, 1] = True
    attn = masked_attention(SimilarityMatrix(np.ones((3, 3)), "ones", True), InteractionMask(e), "scope_only", d=4)
    e2 = np.eye(3, dtype=bool)
    attn2 = masked_attention(SimilarityMatrix(np.ones((3, 3)), "ones", True), InteractionMask(e2), "scope_only", d=4)
    np.testing.assert_array_equal(attn2, np.eye(3))
    assert attn[0, 2] == 0.0 and attn[0, 0] == pytest.approx(0.5)


def test_three_by_three_hand_case():
    s = np.array([[1.0, 0.5, 0.9], [0.5, 1.0, 0.2], [0.9, 0.2, 1.0]])
    e = np.ones((3, 3), bool)
    e[0, 2] = e[2, 0] = False
    attn = masked_attention(SimilarityMatrix(s, "dino_qk", True), InteractionMask(e), "value_recon", tau=0.25)
    expected = np.array([np.e ** 4, np.e ** 2, 0.0]) / (np.e ** 4 + np.e ** 2)
    np.testing.assert_allclose(attn[0], expected, atol=1e-12)
    assert np.round(attn[0], 4).tolist() == [0.8808, 0.1192, 0.0]


def test_scope_only_scales_by_sqrt_d():
    s = SimilarityMatrix(np.array([[4.0, 0.0], [0.0, 4.0]]), "clip_qq", False)
    attn = masked_attention(s, InteractionMask.full(2), "scope_only", d=16)
    np.testing.assert_allclose(attn[0], np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum())


@pytest.mark.parametrize("kwargs", [{"mode": "value_recon", "tau": 0.0}, {"mode": "scope_only", "d": 0},
                                    {"mode": "other", "tau": 1.0}])
def test_attention_parameter_checks(kwargs):
    with pytest.raises(ValueError):
        masked_attention(SimilarityMatrix(np.eye(2), "clip_qq", True), InteractionMask.full(2), **kwargs)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rows_stochastic_and_zero_off_support(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 20))
    labels = rng.integers(-1, 3, n)
    s = SimilarityMatrix(rng.uniform(-1, 1, (n, n)) * 10, "clip_qq", False)
    ms = patch_set(np.unique(labels, return_inverse=True)[1] - (labels.min() < 0))
    mask = semantic_matrix(ms, s)
    for mode in ("scope_only", "value_recon"):
        attn = masked_attention(s, mask, mode, d=64, tau=0.25)
        np.testing.assert_allclose(attn.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(attn[~mask.E] == 0.0)

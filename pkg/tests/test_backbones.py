"""Backbone tests: output formats, shape arithmetic, determinism, gradients."""

import numpy as np
import pytest

from dermfuse import tensor as T
from dermfuse.backbones import (
    MultiToken,
    SpatialMap,
    TinyCnn,
    TinyCnnConfig,
    TinyDualVit,
    TinyDualVitConfig,
    TinyVit,
    TinyVitConfig,
    TokenSeq,
    patchify,
)
from dermfuse.errors import ConfigError
from dermfuse.fusion import adapt
from dermfuse.tensor import Tensor


def images(seed, b=2, size=32):
    return Tensor(np.random.default_rng(seed).standard_normal((b, 3, size, size)))


class TestTinyCnn:
    def test_three_stride2_stages_shape(self):
        cnn = TinyCnn(rng=np.random.default_rng(0))
        out = cnn(images(0))
        assert isinstance(out, SpatialMap)
        assert out.maps.shape == (2, 32, 4, 4)

    def test_zero_input_zero_bias_gives_zero_map(self):
        cnn = TinyCnn(rng=np.random.default_rng(1))
        out = cnn(Tensor(np.zeros((1, 3, 32, 32))))
        np.testing.assert_array_equal(out.maps.data, 0.0)

    def test_too_small_input_rejected(self):
        cnn = TinyCnn(rng=np.random.default_rng(2))
        with pytest.raises(ConfigError, match="too small"):
            cnn(Tensor(np.zeros((1, 3, 4, 4))))

    def test_all_parameters_receive_gradient(self):
        cnn = TinyCnn(rng=np.random.default_rng(3))
        loss = T.sum_all(T.sigmoid(adapt(cnn(images(3)))))
        loss.backward()
        for p in cnn.parameters():
            assert p.grad is not None
            assert np.any(p.grad != 0)


class TestTinyVit:
    def test_token_counts(self):
        vit8 = TinyVit(TinyVitConfig(patch_size=8), rng=np.random.default_rng(4))
        out = vit8(images(4))
        assert isinstance(out, TokenSeq)
        assert out.tokens.shape == (2, 17, 32)

        vit16 = TinyVit(TinyVitConfig(patch_size=16, embed_dim=16),
                        rng=np.random.default_rng(5))
        assert vit16(images(5)).tokens.shape == (2, 5, 16)

    def test_indivisible_image_rejected(self):
        with pytest.raises(ConfigError, match="not divisible"):
            TinyVit(TinyVitConfig(patch_size=7), image_size=32)

    def test_deterministic_given_seed(self):
        a = TinyVit(rng=np.random.default_rng(6))(images(6)).tokens.data
        b = TinyVit(rng=np.random.default_rng(6))(images(6)).tokens.data
        assert a.tobytes() == b.tobytes()

    def test_patchify_raster_order(self):
        # image whose value equals its patch index everywhere: patch k is constant k
        size, p = 8, 4
        img = np.zeros((1, 3, size, size))
        for gi in range(size // p):
            for gj in range(size // p):
                img[:, :, gi * p:(gi + 1) * p, gj * p:(gj + 1) * p] = gi * 2 + gj
        patches = patchify(Tensor(img), p)
        assert patches.shape == (1, 4, 3 * p * p)
        for k in range(4):
            np.testing.assert_array_equal(patches.data[0, k], k)

    def test_permutation_equivariance_of_class_token(self):
        # permuting patches together with their position embeddings leaves
        # the class token unchanged (up to summation order)
        rng = np.random.default_rng(7)
        vit = TinyVit(rng=np.random.default_rng(8))
        img = np.random.default_rng(9).standard_normal((1, 3, 32, 32))
        cls_before = adapt(vit(Tensor(img))).data.copy()

        perm = rng.permutation(16)
        p = vit.cfg.patch_size
        img_perm = np.empty_like(img)
        for dst, src in enumerate(perm):
            si, sj = divmod(int(src), 4)
            di, dj = divmod(dst, 4)
            img_perm[:, :, di * p:(di + 1) * p, dj * p:(dj + 1) * p] = \
                img[:, :, si * p:(si + 1) * p, sj * p:(sj + 1) * p]
        vit.pos_embed.data[0, 1:] = vit.pos_embed.data[0, 1:][perm]

        cls_after = adapt(vit(Tensor(img_perm))).data
        np.testing.assert_allclose(cls_after, cls_before, atol=1e-10)


class TestTinyDualVit:
    def test_default_dims(self):
        dual = TinyDualVit(rng=np.random.default_rng(10))
        out = dual(images(10))
        assert isinstance(out, MultiToken)
        assert [t.shape for t in out.tokens] == [(2, 32), (2, 16)]
        assert dual.feature_dim == 48

    def test_identical_branch_configs_and_seeds_match(self):
        cfg = TinyDualVitConfig(big=TinyVitConfig(8, 32), small=TinyVitConfig(8, 32))
        dual = TinyDualVit(cfg)
        dual.big.init_params(np.random.default_rng(11))
        dual.small.init_params(np.random.default_rng(11))
        out = dual(images(11))
        assert out.tokens[0].data.tobytes() == out.tokens[1].data.tobytes()

    def test_gradient_flows_into_both_branches(self):
        dual = TinyDualVit(rng=np.random.default_rng(12))
        loss = T.sum_all(T.sigmoid(adapt(dual(images(12)))))
        loss.backward()
        for branch in (dual.big, dual.small):
            grads = [p.grad for p in branch.parameters()]
            assert all(g is not None for g in grads)
            assert any(np.any(g != 0) for g in grads)


class TestBundleInvariants:
    def test_token_seq_needs_two_tokens(self):
        with pytest.raises(ConfigError, match="class token"):
            TokenSeq(Tensor(np.zeros((1, 1, 8))))

    def test_multi_token_needs_two_entries(self):
        with pytest.raises(ConfigError, match=">= 2 entries"):
            MultiToken([Tensor(np.zeros((1, 8)))])

    def test_published_feature_dim_matches_adapter_output(self):
        rng = np.random.default_rng(13)
        for backbone in (TinyCnn(rng=rng), TinyVit(rng=rng), TinyDualVit(rng=rng)):
            v = adapt(backbone(images(13)))
            assert v.shape == (2, backbone.feature_dim)

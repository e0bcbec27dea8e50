import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from focalcodec import bsq
from focalcodec import numerics as nx
from focalcodec.codec import (VARIANTS, CodecConfig, CodecModel, bitrate, compress,
                              cosine_similarity, decode_features, encode, knn_convert,
                              pad_to_multiple)
from focalcodec.errors import ConfigError, ShapeError


def toy(variant="fc50", input_dim=12, dims=(8, 6, 4), latent=5, seed=0):
    return CodecModel.init(CodecConfig(variant=variant, input_dim=input_dim, hidden_dims=dims,
                                       latent_dim=latent), seed=seed)


MODELS = {v: toy(v) for v in VARIANTS}


class TestConfig:
    @pytest.mark.parametrize("variant,rate,bps", [("fc50", 50, 650), ("fc25", 25, 325),
                                                  ("fc12_5", 12.5, 162.5)])
    def test_rates(self, variant, rate, bps):
        cfg = CodecConfig(variant=variant)
        assert cfg.token_rate_hz == rate
        assert cfg.codebook_size == 8192
        assert bitrate(cfg) == bps

    def test_rounded_kbps(self):
        assert round(bitrate(CodecConfig(variant="fc25")) / 1000, 2) in (0.32, 0.33)
        assert round(bitrate(CodecConfig(variant="fc12_5")) / 1000, 2) == 0.16

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            CodecConfig(variant="fc10")

    def test_dict_roundtrip(self):
        cfg = CodecConfig(variant="fc25", hidden_dims=(8, 4, 2), latent_dim=6)
        assert CodecConfig.from_dict(cfg.to_dict()) == cfg

    def test_scaled(self):
        cfg = CodecConfig().scaled(16)
        assert cfg.hidden_dims == (64, 32, 16) and cfg.downsample_factors == (1, 1, 1)

    def test_mirrored_decompressor(self):
        m = toy("fc12_5")
        assert [b.factor for b in m.compressor] == [2, 2, 1]
        assert [b.factor for b in m.decompressor] == [1, 2, 2]
        assert [b.direction for b in m.decompressor] == ["up"] * 3


class TestEncodeDecode:
    @pytest.mark.parametrize("variant,t,n", [("fc50", 100, 100), ("fc12_5", 100, 25),
                                             ("fc25", 101, 51)])
    def test_token_counts(self, variant, t, n):
        feats = np.random.default_rng(t).normal(size=(t, 12))
        assert encode(feats, MODELS[variant]).shape == (n,)

    @given(st.integers(1, 120), st.sampled_from(sorted(VARIANTS)))
    def test_rate_law(self, t, variant):
        model = MODELS[variant]
        feats = np.random.default_rng(t).normal(size=(t, 12))
        tokens = encode(feats, model)
        f = model.config.total_factor
        assert tokens.size == -(-t // f)
        assert tokens.min() >= 0 and tokens.max() < model.config.codebook_size
        assert decode_features(tokens, model).shape == (tokens.size * f, 12)

    def test_decode_is_pure(self, rng):
        tokens = rng.integers(0, 32, size=9)
        a = decode_features(tokens, MODELS["fc25"])
        b = decode_features(tokens, MODELS["fc25"])
        assert a.tobytes() == b.tobytes()

    def test_encode_is_pure(self, rng):
        feats = rng.normal(size=(17, 12))
        np.testing.assert_array_equal(encode(feats, MODELS["fc50"]), encode(feats, MODELS["fc50"]))

    def test_token_code_token(self, rng):
        model = MODELS["fc50"]
        feats = rng.normal(size=(20, 12))
        tokens = encode(feats, model)
        with nx.no_grad():
            _, again = bsq.quantize_ste(compress(model, feats))
        np.testing.assert_array_equal(tokens, again)
        codes = bsq.index_to_code(tokens, model.config.latent_dim)
        np.testing.assert_array_equal(bsq.code_index(codes), tokens)

    def test_wrong_feature_dim(self, rng):
        with pytest.raises(ShapeError):
            encode(rng.normal(size=(5, 11)), MODELS["fc50"])

    def test_out_of_range_token_names_position(self):
        with pytest.raises(ValueError, match="position 2"):
            decode_features(np.array([0, 1, 32, 3]), MODELS["fc50"])

    def test_empty_tokens(self):
        assert decode_features(np.zeros(0, dtype=int), MODELS["fc50"]).shape == (0, 12)

    def test_pad_edge(self):
        x = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(pad_to_multiple(x, 4)[-1], x[-1])
        assert pad_to_multiple(x, 3) is x

    def test_state_dict_roundtrip(self):
        a, b = toy(seed=1), toy(seed=2)
        b.load_state_dict(a.state_dict())
        for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
            assert n1 == n2 and np.array_equal(p1.data, p2.data)

    def test_state_dict_mismatch(self):
        with pytest.raises(ConfigError):
            toy().load_state_dict({"bogus": np.zeros(1)})


def brute_knn(src, ref, k):
    out = np.empty((len(src), src.shape[1]))
    for i, q in enumerate(src):
        sims = [float(np.dot(q, r) / (np.linalg.norm(q) * np.linalg.norm(r))) for r in ref]
        order = sorted(range(len(ref)), key=lambda j: (-sims[j], j))
        out[i] = ref[order[:k]].mean(axis=0)
    return out


class TestKnn:
    @pytest.mark.parametrize("k", [1, 2, 4])
    def test_matches_brute_force(self, rng, k):
        src, ref = rng.normal(size=(20, 8)), rng.normal(size=(30, 8))
        np.testing.assert_allclose(knn_convert(src, ref, k), brute_knn(src, ref, k), atol=1e-6)

    def test_ties_go_to_lower_index(self):
        ref = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [3.0, 0.0]])
        out = knn_convert(np.array([[5.0, 0.0]]), ref, k=2)
        np.testing.assert_allclose(out, [[1.5, 0.0]])

    def test_exact_copy(self, rng):
        ref = np.eye(6) * rng.uniform(1, 2, size=6)[:, None]
        np.testing.assert_allclose(knn_convert(ref[3:4] * 1.0, ref, k=1), ref[3:4])

    def test_k_equals_pool(self, rng):
        src, ref = rng.normal(size=(5, 4)), rng.normal(size=(7, 4))
        np.testing.assert_allclose(knn_convert(src, ref, k=7), np.repeat(ref.mean(0, keepdims=True), 5, 0),
                                   atol=1e-6)

    def test_self_identity(self, rng):
        src = rng.normal(size=(50, 16)).astype(np.float32)
        np.testing.assert_array_equal(knn_convert(src, src, k=1), src)

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            knn_convert(rng.normal(size=(2, 3)), rng.normal(size=(3, 3)), k=4)
        with pytest.raises(ValueError):
            knn_convert(rng.normal(size=(2, 3)), np.zeros((5, 3)), k=1)
        with pytest.raises(ShapeError):
            knn_convert(rng.normal(size=(2, 3)), rng.normal(size=(5, 4)), k=1)

    def test_cosine_chunking_invariant(self, rng):
        a, b = rng.normal(size=(10, 5)), rng.normal(size=(7, 5))
        np.testing.assert_array_equal(cosine_similarity(a, b, chunk=3), cosine_similarity(a, b))

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from focalcodec import FeatureVocoder, FocalCodec, KNNVoiceConverter
from focalcodec.codec import knn_convert
from focalcodec.errors import ShapeError
from focalcodec.validation import check_token_sequences, check_utterances, worker_count

TINY = dict(input_dim=8, hidden_dims=(8, 6, 4), latent_dim=4, n_steps=3, batch_size=2)


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(0)
    return [rng.normal(size=(n, 8)).astype(np.float32) for n in (9, 12, 7)]


@pytest.fixture(scope="module")
def fitted(data):
    return FocalCodec(variant="fc25", **TINY).fit(data)


def test_params_roundtrip():
    est = FocalCodec(**TINY)
    assert est.get_params()["latent_dim"] == 4
    est.set_params(variant="fc12_5", lr=1e-3)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert not hasattr(twin, "model_")


def test_fit_attributes(fitted):
    assert fitted.n_features_in_ == 8
    assert len(fitted.history_) == 3
    assert fitted.bitrate_ == 25 * 4


def test_transform_shapes(fitted, data):
    tokens = fitted.transform(data)
    assert [t.size for t in tokens] == [5, 6, 4]
    single = fitted.transform(data[0])
    np.testing.assert_array_equal(single, tokens[0])
    assert max(t.max() for t in tokens) < 16
    feats = fitted.inverse_transform(tokens)
    assert [f.shape for f in feats] == [(10, 8), (12, 8), (8, 8)]


def test_score_is_negative_mse(fitted, data):
    s = fitted.score(data)
    recon = fitted.inverse_transform(fitted.transform(data))
    expected = np.mean([np.mean((r[:len(x)] - x) ** 2) for r, x in zip(recon, data)])
    assert s == pytest.approx(-expected)


def test_same_seed_same_model(data):
    a = FocalCodec(**TINY, random_state=5).fit(data)
    b = FocalCodec(**TINY, random_state=5).fit(data)
    assert a.history_ == b.history_
    for t1, t2 in zip(a.transform(data), b.transform(data)):
        np.testing.assert_array_equal(t1, t2)


def test_threads_do_not_change_results(fitted, data, monkeypatch):
    serial = fitted.transform(data)
    monkeypatch.setenv("FOCALCODEC_THREADS", "3")
    for a, b in zip(serial, fitted.transform(data)):
        np.testing.assert_array_equal(a, b)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        FocalCodec(**TINY).transform(np.zeros((3, 8)))


def test_validation_errors(fitted):
    with pytest.raises(ShapeError, match="utterance 1 has 5 features"):
        fitted.transform([np.zeros((3, 8)), np.zeros((3, 5))])
    with pytest.raises(ValueError):
        fitted.transform(np.full((3, 8), np.nan))
    with pytest.raises(ValueError, match="position 2"):
        fitted.inverse_transform(np.array([0, 1, 16]))
    with pytest.raises(ValueError, match="no utterances"):
        fitted.transform([])


def test_knn_estimator(rng):
    ref = [rng.normal(size=(15, 6)), rng.normal(size=(10, 6))]
    src = rng.normal(size=(7, 6))
    conv = KNNVoiceConverter(k=3).fit(ref)
    np.testing.assert_allclose(conv.transform(src), knn_convert(src, np.concatenate(ref), 3),
                               rtol=1e-6)
    with pytest.raises(NotFittedError):
        KNNVoiceConverter().transform(src)


def test_vocoder_estimator(rng):
    voc = FeatureVocoder(n_blocks=1, hidden=16, ffn=32, input_dim=6, random_state=2).fit()
    wave = voc.transform(rng.normal(size=(5, 6)))
    assert wave.shape == (5 * 320,)
    twin = FeatureVocoder.from_params(voc.params_, voc.config_)
    np.testing.assert_array_equal(twin.transform(np.ones((5, 6))),
                                  voc.transform(np.ones((5, 6))))


class TestValidationHelpers:
    def test_single_flag(self):
        out, single = check_utterances(np.zeros((2, 3)))
        assert single and out[0].dtype == np.float32
        out, single = check_utterances([np.zeros((2, 3))])
        assert not single

    def test_token_dtype(self):
        with pytest.raises(ValueError, match="integer"):
            check_token_sequences(np.array([0.5]), 4)

    @pytest.mark.parametrize("raw", ["0", "-2", "many"])
    def test_bad_thread_env(self, monkeypatch, raw):
        monkeypatch.setenv("FOCALCODEC_THREADS", raw)
        with pytest.raises(ValueError, match="FOCALCODEC_THREADS"):
            worker_count()

    def test_thread_env(self, monkeypatch):
        monkeypatch.delenv("FOCALCODEC_THREADS", raising=False)
        assert worker_count() == 1
        monkeypatch.setenv("FOCALCODEC_THREADS", "4")
        assert worker_count() == 4

"""scikit-learn style wrappers: the codec, the kNN converter and the vocoder."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .codec import CodecConfig, CodecModel, bitrate, decode_features, encode, knn_convert
from .trainer import TrainConfig, train_stage1
from .validation import check_token_sequences, check_utterances, worker_count
from .vocoder import VocoderConfig, VocoderParams, synthesize


def _map(fn, items):
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


class FocalCodec(TransformerMixin, BaseEstimator):
    """Feature codec: ``fit`` runs stage-1 training, ``transform`` emits tokens,
    ``inverse_transform`` decodes tokens back to 50 Hz features.

    ``X`` is one ``[T, input_dim]`` array or a list of them (one per utterance).

    Parameters
    ----------
    variant : {"fc50", "fc25", "fc12_5"}
        Selects the temporal downsampling factors (token rate 50 / 25 / 12.5 Hz).
    hidden_dims : tuple of int
        Compressor widths; the decompressor mirrors them.
    latent_dim : int
        Bits per token; the codebook has ``2**latent_dim`` entries.
    n_steps, batch_size, lr, ... :
        Optimiser settings passed to :class:`~focalcodec.trainer.TrainConfig`.
    random_state : int
        Seeds weight initialisation and batch order.
    """

    def __init__(self, variant="fc50", input_dim=1024, hidden_dims=(1024, 512, 256),
                 latent_dim=13, focal_levels=2, focal_window=7, focal_factor=2,
                 layer_scale_init=1e-4, temperature=0.1, entropy_weight=0.1, lr=5e-4,
                 beta1=0.8, beta2=0.99, weight_decay=0.01, grad_clip=5.0, batch_size=4,
                 n_steps=200, random_state=0):
        self.variant = variant
        self.input_dim = input_dim
        self.hidden_dims = hidden_dims
        self.latent_dim = latent_dim
        self.focal_levels = focal_levels
        self.focal_window = focal_window
        self.focal_factor = focal_factor
        self.layer_scale_init = layer_scale_init
        self.temperature = temperature
        self.entropy_weight = entropy_weight
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.random_state = random_state

    def _codec_config(self):
        return CodecConfig(
            variant=self.variant, input_dim=self.input_dim, hidden_dims=tuple(self.hidden_dims),
            latent_dim=self.latent_dim, focal_levels=self.focal_levels,
            focal_window=self.focal_window, focal_factor=self.focal_factor,
            layer_scale_init=self.layer_scale_init, temperature=self.temperature,
            entropy_weight=self.entropy_weight)

    def _train_config(self):
        return TrainConfig(
            lr=self.lr, beta1=self.beta1, beta2=self.beta2, weight_decay=self.weight_decay,
            grad_clip_l2=self.grad_clip, entropy_weight=self.entropy_weight,
            batch=self.batch_size, steps=self.n_steps, seed=self.random_state)

    def fit(self, X, y=None, validation=None):
        utterances, _ = check_utterances(X, self.input_dim)
        model = CodecModel.init(self._codec_config(), seed=self.random_state)
        self.model_, self.history_ = train_stage1(utterances, model, self._train_config(),
                                                  validation=validation)
        self.n_features_in_ = self.input_dim
        return self

    @classmethod
    def from_model(cls, model):
        """A fitted estimator around an existing (e.g. loaded) :class:`CodecModel`."""
        c = model.config
        est = cls(variant=c.variant, input_dim=c.input_dim, hidden_dims=c.hidden_dims,
                  latent_dim=c.latent_dim, focal_levels=c.focal_levels,
                  focal_window=c.focal_window, focal_factor=c.focal_factor,
                  layer_scale_init=c.layer_scale_init, temperature=c.temperature,
                  entropy_weight=c.entropy_weight)
        est.model_ = model
        est.history_ = []
        est.n_features_in_ = c.input_dim
        return est

    def transform(self, X):
        check_is_fitted(self, "model_")
        utterances, single = check_utterances(X, self.n_features_in_)
        tokens = _map(lambda x: encode(x, self.model_), utterances)
        return tokens[0] if single else tokens

    def inverse_transform(self, tokens):
        check_is_fitted(self, "model_")
        seqs, single = check_token_sequences(tokens, self.model_.config.codebook_size)
        feats = _map(lambda t: decode_features(t, self.model_), seqs)
        return feats[0] if single else feats

    def score(self, X, y=None):
        """Negative mean squared reconstruction error over all frames."""
        utterances, _ = check_utterances(X, self.n_features_in_)
        recon = self.inverse_transform(self.transform(utterances))
        err = [np.mean((r[:len(x)] - x) ** 2) for r, x in zip(recon, utterances)]
        return -float(np.mean(err))

    @property
    def bitrate_(self):
        check_is_fitted(self, "model_")
        return bitrate(self.model_.config)


class KNNVoiceConverter(TransformerMixin, BaseEstimator):
    """``fit`` stores the reference speaker's continuous features; ``transform``
    replaces each source frame with the mean of its ``k`` nearest reference frames
    (cosine similarity)."""

    def __init__(self, k=4):
        self.k = k

    def fit(self, X, y=None):
        utterances, _ = check_utterances(X)
        self.pool_ = np.concatenate(utterances, axis=0)
        self.n_features_in_ = self.pool_.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "pool_")
        utterances, single = check_utterances(X, self.n_features_in_)
        out = [knn_convert(x, self.pool_, self.k) for x in utterances]
        return out[0] if single else out


class FeatureVocoder(TransformerMixin, BaseEstimator):
    """Features -> waveform through ConvNeXt blocks and an iSTFT head.

    Adversarial vocoder training is not part of this package: ``fit`` only
    initialises weights (seeded); load trained weights with :meth:`from_params`.
    """

    def __init__(self, n_blocks=8, hidden=512, ffn=1536, kernel=7, input_dim=1024,
                 random_state=0):
        self.n_blocks = n_blocks
        self.hidden = hidden
        self.ffn = ffn
        self.kernel = kernel
        self.input_dim = input_dim
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.config_ = VocoderConfig(n_blocks=self.n_blocks, hidden=self.hidden, ffn=self.ffn,
                                     kernel=self.kernel, input_dim=self.input_dim)
        self.params_ = VocoderParams.init(self.config_, seed=self.random_state)
        return self

    @classmethod
    def from_params(cls, params, config):
        est = cls(n_blocks=config.n_blocks, hidden=config.hidden, ffn=config.ffn,
                  kernel=config.kernel, input_dim=config.input_dim)
        est.config_, est.params_ = config, params
        return est

    def transform(self, X):
        check_is_fitted(self, "params_")
        utterances, single = check_utterances(X, self.input_dim)
        waves = _map(lambda f: synthesize(f, self.params_, self.config_), utterances)
        return waves[0] if single else waves

"""iSTFT vocoder head, STFT / log-Mel analysis, and chunked streaming decode."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .codec import decode_features
from .errors import ConfigError, ShapeError
from .numerics import ConvSpec

MEL_FLOOR = 1e-5


@dataclass(frozen=True)
class VocoderConfig:
    n_blocks: int = 8
    hidden: int = 512
    ffn: int = 1536
    kernel: int = 7
    n_fft: int = 1024
    hop: int = 320
    sample_rate: int = 16000
    n_mels: int = 80
    input_dim: int = 1024
    feature_rate_hz: float = 50.0
    log_mag_max: float = 2.0

    def __post_init__(self):
        if self.hop * self.feature_rate_hz != self.sample_rate:
            raise ConfigError(f"hop {self.hop} x {self.feature_rate_hz} Hz != sample rate "
                              f"{self.sample_rate}")
        if self.n_fft < self.hop:
            raise ConfigError(f"n_fft {self.n_fft} is shorter than hop {self.hop}")
        if self.kernel % 2 == 0:
            raise ConfigError("ConvNeXt kernel must be odd")

    @property
    def n_bins(self):
        return self.n_fft // 2 + 1

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class StreamConfig:
    chunk_size: int = 8000
    left_context: int = 48000
    overlap: int = 250

    def __post_init__(self):
        if self.left_context < 0:
            raise ConfigError("left_context must be >= 0")
        if self.overlap < 0:
            raise ConfigError("overlap must be >= 0")
        if self.chunk_size <= self.overlap:
            raise ConfigError(f"chunk_size {self.chunk_size} must exceed overlap {self.overlap}")


# ----------------------------------------------------------------------------
# STFT


def hann_window(n):
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(wave, n_fft=1024, hop=320):
    """Centred STFT with reflect padding; returns ``[frames, n_fft // 2 + 1]`` complex."""
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1:
        raise ShapeError(f"stft expects a 1-d signal, got shape {wave.shape}", dim="ndim")
    if wave.size < n_fft:
        raise ShapeError(f"signal of {wave.size} samples is shorter than n_fft={n_fft}",
                         dim="samples", expected=n_fft, actual=wave.size)
    pad = n_fft // 2
    padded = np.pad(wave, pad, mode="reflect")
    n_frames = 1 + wave.size // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(padded[idx] * hann_window(n_fft), axis=1)


def istft(spec, n_fft=1024, hop=320, length=None):
    """Inverse of :func:`stft` using squared-window-sum normalised overlap-add."""
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != n_fft // 2 + 1:
        raise ShapeError(f"istft expects [frames, {n_fft // 2 + 1}], got {spec.shape}",
                         dim="bins", expected=n_fft // 2 + 1, actual=spec.shape[-1])
    n_frames = spec.shape[0]
    win = hann_window(n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * win
    total = n_fft + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    np.add.at(out, idx, frames)
    np.add.at(norm, idx, np.broadcast_to(win * win, frames.shape))
    out = np.divide(out, norm, out=np.zeros_like(out), where=norm > 1e-11)
    pad = n_fft // 2
    length = hop * (n_frames - 1) if length is None else length
    out = out[pad:pad + length]
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return out


def mel_filterbank(n_mels=80, n_fft=1024, sample_rate=16000):
    """HTK-scale triangular filters from 0 Hz to Nyquist, peak height 1."""
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def log_mel(wave, config=None):
    """``[frames, n_mels]`` log power Mel spectrogram, floored at ``1e-5``."""
    config = config or VocoderConfig()
    spec = stft(wave, config.n_fft, config.hop)
    fb = mel_filterbank(config.n_mels, config.n_fft, config.sample_rate)
    mel = (np.abs(spec) ** 2) @ fb.T
    return np.log(np.maximum(mel, MEL_FLOOR))


# ----------------------------------------------------------------------------
# synthesis network


@dataclass
class ConvNeXtParams:
    dw_w: nx.Tensor
    dw_b: nx.Tensor
    norm_gamma: nx.Tensor
    norm_beta: nx.Tensor
    pw1_w: nx.Tensor
    pw1_b: nx.Tensor
    pw2_w: nx.Tensor
    pw2_b: nx.Tensor
    layer_scale: nx.Tensor


@dataclass
class VocoderParams:
    in_w: nx.Tensor
    in_b: nx.Tensor
    blocks: list
    head_w: nx.Tensor
    head_b: nx.Tensor

    @classmethod
    def init(cls, config, seed=0):
        rng = np.random.default_rng(seed)
        h = config.hidden
        blocks = [
            ConvNeXtParams(
                dw_w=nx.trunc_normal(rng, (h, 1, config.kernel)),
                dw_b=nx.zeros(h),
                norm_gamma=nx.full(h, 1.0),
                norm_beta=nx.zeros(h),
                pw1_w=nx.trunc_normal(rng, (h, config.ffn)),
                pw1_b=nx.zeros(config.ffn),
                pw2_w=nx.trunc_normal(rng, (config.ffn, h)),
                pw2_b=nx.zeros(h),
                layer_scale=nx.full(h, 1.0 / config.n_blocks),
            )
            for _ in range(config.n_blocks)
        ]
        return cls(
            in_w=nx.trunc_normal(rng, (config.input_dim, h)),
            in_b=nx.zeros(h),
            blocks=blocks,
            head_w=nx.trunc_normal(rng, (h, 2 * config.n_bins)),
            head_b=nx.zeros(2 * config.n_bins),
        )

    def named_parameters(self):
        yield from nx.named_parameters(self)

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            raise ConfigError("vocoder checkpoint parameter names do not match the config")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != {p.shape}",
                                 dim=name, expected=p.shape, actual=arr.shape)
            p.data = arr.astype(np.float32).copy()
        return self


def convnext_block(x, p, kernel):
    """Depthwise conv -> LayerNorm -> pointwise MLP, layer-scaled residual on ``x[T, C]``."""
    spec = ConvSpec(kernel, groups=x.shape[1])
    y = nx.transpose(nx.conv1d(nx.transpose(x), p.dw_w, p.dw_b, spec))
    y = nx.layer_norm(y, p.norm_gamma, p.norm_beta)
    y = nx.linear(nx.gelu(nx.linear(y, p.pw1_w, p.pw1_b)), p.pw2_w, p.pw2_b)
    return x + p.layer_scale * y


def synthesize(features, params, config=None):
    """Waveform of exactly ``T * hop`` samples from ``[T, input_dim]`` features."""
    config = config or VocoderConfig()
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2 or features.shape[1] != config.input_dim:
        raise ShapeError(f"vocoder expects [T, {config.input_dim}], got {features.shape}",
                         dim="D", expected=config.input_dim,
                         actual=features.shape[-1] if features.ndim else None)
    n_frames = features.shape[0]
    if n_frames == 0:
        return np.zeros(0)
    with nx.no_grad():
        x = nx.linear(features, params.in_w, params.in_b)
        for block in params.blocks:
            x = convnext_block(x, block, config.kernel)
        head = nx.linear(x, params.head_w, params.head_b).data.astype(np.float64)
    log_mag, phase = head[:, :config.n_bins], head[:, config.n_bins:]
    mag = np.exp(np.minimum(log_mag, config.log_mag_max))
    spec = mag * np.exp(1j * phase)
    return istft(spec, config.n_fft, config.hop, length=n_frames * config.hop)


# ----------------------------------------------------------------------------
# streaming


def crossfade_weights(n):
    """Linear ``(fade_out, fade_in)`` ramps of length ``n``; they sum to 1 sample-wise."""
    fade_in = (np.arange(n) + 0.5) / n
    return 1.0 - fade_in, fade_in


def stitch(head, tail, overlap):
    """Overlap-add ``tail`` after ``head``, crossfading the last/first ``overlap`` samples."""
    head, tail = np.asarray(head, dtype=np.float64), np.asarray(tail, dtype=np.float64)
    if overlap == 0:
        return np.concatenate([head, tail])
    if overlap > min(head.size, tail.size):
        raise ValueError(f"overlap {overlap} exceeds a segment length "
                         f"({head.size}, {tail.size})")
    fade_out, fade_in = crossfade_weights(overlap)
    mixed = head[-overlap:] * fade_out + tail[:overlap] * fade_in
    return np.concatenate([head[:-overlap], mixed, tail[overlap:]])


def decode_wave(tokens, codec_model, vocoder_params, vocoder_config=None):
    """Offline tokens -> features -> waveform."""
    feats = decode_features(tokens, codec_model)
    return synthesize(feats, vocoder_params, vocoder_config)


def stream_decode(tokens, codec_model, vocoder_params, stream_config, vocoder_config=None):
    """Chunk-wise decode with left context, stitched by linear crossfade.

    Each chunk re-decodes the tokens covering its samples plus ``overlap``
    samples of look-ahead and up to ``left_context`` samples of history.
    The result has the same length as the offline decode.
    """
    vc = vocoder_config or VocoderConfig()
    sc = stream_config
    factor = codec_model.config.total_factor
    tokens = np.asarray(tokens, dtype=np.int64)
    per_token = vc.hop * factor
    total = tokens.size * per_token
    ctx_tokens = (sc.left_context // vc.hop) // factor
    out = np.zeros(0)
    start = 0
    while start < total:
        stop = min(start + sc.chunk_size, total)
        seg_end = min(stop + sc.overlap, total)
        t0 = max(0, start // per_token - ctx_tokens)
        t1 = -(-seg_end // per_token)
        wave = decode_wave(tokens[t0:t1], codec_model, vocoder_params, vc)
        segment = wave[start - t0 * per_token:seg_end - t0 * per_token]
        out = segment if start == 0 else stitch(out, segment, out.size - start)
        start = stop
    return out

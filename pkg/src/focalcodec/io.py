"""Binary file formats: FCF1 features, FCT1 token streams, checkpoints, PCM16 WAV.

All header integers are little-endian.  Token payloads are bit-packed
MSB-first, ``latent_dim`` bits per token, zero-padded to a whole byte.
See README.md for the byte layouts.
"""

from __future__ import annotations

import json
import struct
import wave
from dataclasses import dataclass

import numpy as np

from .codec import VARIANT_IDS
from .errors import FormatError

FEATURE_MAGIC = b"FCF1"
TOKEN_MAGIC = b"FCT1"
CHECKPOINT_MAGIC = b"FCK1"
TOKEN_VERSION = 1
CHECKPOINT_VERSION = 1
SAMPLE_RATE = 16000

_TOKEN_HEADER = struct.Struct("<4sBBHII")
_FEATURE_HEADER = struct.Struct("<4sII")
_VARIANT_NAMES = {v: k for k, v in VARIANT_IDS.items()}


# ----------------------------------------------------------------------------
# bit packing


def pack_tokens(tokens, latent_dim):
    """Pack tokens MSB-first into ``ceil(n * latent_dim / 8)`` bytes."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if not 1 <= latent_dim <= 32:
        raise ValueError(f"latent_dim must be in [1, 32], got {latent_dim}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= 1 << latent_dim):
        bad = int(np.flatnonzero((tokens < 0) | (tokens >= 1 << latent_dim))[0])
        raise ValueError(f"token {int(tokens[bad])} at position {bad} needs more than "
                         f"{latent_dim} bits")
    shifts = np.arange(latent_dim - 1, -1, -1, dtype=np.int64)
    bits = ((tokens[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1)).tobytes()


def unpack_tokens(payload, count, latent_dim):
    """Inverse of :func:`pack_tokens`; the payload length must match exactly."""
    expected = -(-count * latent_dim // 8)
    if len(payload) != expected:
        raise FormatError(f"token payload is {len(payload)} bytes, expected {expected} for "
                          f"{count} tokens of {latent_dim} bits")
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[:count * latent_dim]
    weights = np.int64(1) << np.arange(latent_dim - 1, -1, -1, dtype=np.int64)
    return bits.reshape(count, latent_dim).astype(np.int64) @ weights


# ----------------------------------------------------------------------------
# token streams


@dataclass(frozen=True)
class TokenStream:
    variant: str
    latent_dim: int
    sample_rate: int
    tokens: np.ndarray

    def to_bytes(self):
        if self.variant not in VARIANT_IDS:
            raise FormatError(f"unknown variant {self.variant!r}")
        tokens = np.asarray(self.tokens, dtype=np.int64)
        header = _TOKEN_HEADER.pack(TOKEN_MAGIC, TOKEN_VERSION, VARIANT_IDS[self.variant],
                                    self.latent_dim, self.sample_rate, tokens.size)
        return header + pack_tokens(tokens, self.latent_dim)

    @classmethod
    def from_bytes(cls, blob):
        if len(blob) < _TOKEN_HEADER.size:
            raise FormatError(f"token stream truncated: {len(blob)} bytes, header needs "
                              f"{_TOKEN_HEADER.size}")
        magic, version, variant, latent_dim, rate, count = _TOKEN_HEADER.unpack_from(blob)
        if magic != TOKEN_MAGIC:
            raise FormatError(f"bad token stream magic {magic!r}")
        if version != TOKEN_VERSION:
            raise FormatError(f"unsupported token stream version {version}")
        if variant not in _VARIANT_NAMES:
            raise FormatError(f"unknown variant id {variant}")
        if not 1 <= latent_dim <= 32:
            raise FormatError(f"latent_dim {latent_dim} out of range")
        tokens = unpack_tokens(blob[_TOKEN_HEADER.size:], count, latent_dim)
        return cls(_VARIANT_NAMES[variant], latent_dim, rate, tokens)


def write_tokens(path, stream):
    with open(path, "wb") as fh:
        fh.write(stream.to_bytes())


def read_tokens(path):
    with open(path, "rb") as fh:
        return TokenStream.from_bytes(fh.read())


# ----------------------------------------------------------------------------
# feature files


def features_to_bytes(features):
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise FormatError(f"features must be 2-d [T, D], got shape {arr.shape}")
    return _FEATURE_HEADER.pack(FEATURE_MAGIC, *arr.shape) + arr.astype("<f4").tobytes()


def features_from_bytes(blob):
    if len(blob) < _FEATURE_HEADER.size:
        raise FormatError(f"feature file truncated: {len(blob)} bytes")
    magic, t, d = _FEATURE_HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad feature file magic {magic!r}")
    payload = blob[_FEATURE_HEADER.size:]
    if len(payload) != 4 * t * d:
        raise FormatError(f"feature payload is {len(payload)} bytes, expected {4 * t * d}")
    return np.frombuffer(payload, dtype="<f4").reshape(t, d).astype(np.float32)


def write_features(path, features):
    with open(path, "wb") as fh:
        fh.write(features_to_bytes(features))


def read_features(path):
    with open(path, "rb") as fh:
        return features_from_bytes(fh.read())


# ----------------------------------------------------------------------------
# checkpoints


def checkpoint_to_bytes(kind, config, state, extra=None):
    meta = json.dumps({"kind": kind, "config": config, "extra": extra or {}},
                      sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(meta)), meta,
             struct.pack("<I", len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr)
        raw = name.encode()
        parts.append(struct.pack("<HB", len(raw), arr.ndim) + raw)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(blob):
    """Return ``(kind, config, state, extra)``."""
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"checkpoint truncated at byte {pos} (needed {n} more)")
        out = bytes(view[pos:pos + n])
        pos += n
        return out

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, meta_len = struct.unpack("<HI", take(6))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    meta = json.loads(take(meta_len))
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        name_len, ndim = struct.unpack("<HB", take(3))
        name = take(name_len).decode()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after checkpoint tensors")
    return meta["kind"], meta["config"], state, meta.get("extra", {})


def save_checkpoint(path, kind, config, state, extra=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(kind, config, state, extra))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def save_codec(path, model, extra=None):
    save_checkpoint(path, "codec", model.config.to_dict(), model.state_dict(), extra)


def load_codec(path):
    from .codec import CodecConfig, CodecModel

    kind, config, state, _ = load_checkpoint(path)
    if kind != "codec":
        raise FormatError(f"{path} holds a {kind!r} checkpoint, expected 'codec'")
    cfg = CodecConfig.from_dict(config)
    return CodecModel.init(cfg).load_state_dict(state)


def save_vocoder(path, params, config, extra=None):
    save_checkpoint(path, "vocoder", config.to_dict(), params.state_dict(), extra)


def load_vocoder(path):
    from .vocoder import VocoderConfig, VocoderParams

    kind, config, state, _ = load_checkpoint(path)
    if kind != "vocoder":
        raise FormatError(f"{path} holds a {kind!r} checkpoint, expected 'vocoder'")
    cfg = VocoderConfig(**config)
    return VocoderParams.init(cfg).load_state_dict(state), cfg


# ----------------------------------------------------------------------------
# WAV


def read_wav(path):
    """Mono 16 kHz PCM16 WAV -> float64 samples in ``[-1, 1)``."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            if channels != 1:
                raise FormatError(f"unsupported format: {channels} channels (mono required)")
            if width != 2:
                raise FormatError(f"unsupported format: {8 * width}-bit samples (PCM16 required)")
            if rate != SAMPLE_RATE:
                raise FormatError(f"unsupported format: {rate} Hz (16000 Hz required, "
                                  "no resampling is done)")
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"malformed or unsupported WAV file: {exc}") from None
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, samples):
    """Write float samples as mono 16 kHz PCM16, clipping to the representable range."""
    samples = np.asarray(samples, dtype=np.float64)
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(pcm.tobytes())

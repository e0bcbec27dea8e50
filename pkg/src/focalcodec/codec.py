"""Compressor -> BSQ -> decompressor pipelines, rate arithmetic, and kNN conversion."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import bsq
from . import numerics as nx
from .errors import ConfigError, ShapeError
from .focalnet import ScaleBlockParams, focal_downscale, focal_upscale

VARIANTS = {
    "fc50": (1, 1, 1),
    "fc25": (2, 1, 1),
    "fc12_5": (2, 2, 1),
}
VARIANT_IDS = {"fc50": 0, "fc25": 1, "fc12_5": 2}


@dataclass(frozen=True)
class CodecConfig:
    variant: str = "fc50"
    input_dim: int = 1024
    hidden_dims: tuple = (1024, 512, 256)
    latent_dim: int = 13
    downsample_factors: tuple = None
    feature_rate_hz: float = 50.0
    focal_levels: int = 2
    focal_window: int = 7
    focal_factor: int = 2
    layer_scale_init: float = 1e-4
    temperature: float = 0.1
    entropy_weight: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        factors = self.downsample_factors
        factors = VARIANTS[self.variant] if factors is None else tuple(int(f) for f in factors)
        object.__setattr__(self, "downsample_factors", factors)
        if len(factors) != len(self.hidden_dims):
            raise ConfigError("need one downsample factor per hidden dim")
        if any(f not in (1, 2) for f in factors):
            raise ConfigError(f"downsample factors must be 1 or 2, got {factors}")
        if self.input_dim < 1 or self.latent_dim < 1 or min(self.hidden_dims) < 1:
            raise ConfigError("dimensions must be positive")

    @property
    def total_factor(self):
        return math.prod(self.downsample_factors)

    @property
    def token_rate_hz(self):
        return self.feature_rate_hz / self.total_factor

    @property
    def codebook_size(self):
        return 2 ** self.latent_dim

    @property
    def bsq(self):
        return bsq.BsqConfig(self.latent_dim, self.temperature, self.entropy_weight)

    def scaled(self, width_divisor):
        """Same topology with every hidden width divided by ``width_divisor``."""
        dims = tuple(max(1, d // width_divisor) for d in self.hidden_dims)
        return replace(self, hidden_dims=dims)

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["downsample_factors"] = list(self.downsample_factors)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def bitrate(config):
    """Bits per second: token rate times bits per token."""
    return config.token_rate_hz * math.log2(config.codebook_size)


@dataclass
class CodecModel:
    config: CodecConfig
    compressor: list
    latent_w: nx.Tensor
    latent_b: nx.Tensor
    expand_w: nx.Tensor
    expand_b: nx.Tensor
    decompressor: list
    out_w: nx.Tensor
    out_b: nx.Tensor

    @classmethod
    def init(cls, config, seed=0):
        rng = np.random.default_rng(seed)
        focal = dict(focal_levels=config.focal_levels, focal_window=config.focal_window,
                     focal_factor=config.focal_factor, layer_scale_init=config.layer_scale_init)
        dims = config.hidden_dims
        ins = (config.input_dim,) + dims[:-1]
        compressor = [ScaleBlockParams.init(i, o, f, "down", rng, **focal)
                      for i, o, f in zip(ins, dims, config.downsample_factors)]
        latent_w = nx.fan_in_normal(rng, (dims[-1], config.latent_dim), dims[-1])
        latent_b = nx.zeros(config.latent_dim)
        expand_w = nx.fan_in_normal(rng, (config.latent_dim, dims[-1]), config.latent_dim)
        expand_b = nx.zeros(dims[-1])
        # mirror: widths walk back up, factors apply in reverse order
        up_in = dims[::-1]
        up_out = dims[::-1][1:] + (dims[0],)
        decompressor = [ScaleBlockParams.init(i, o, f, "up", rng, **focal)
                        for i, o, f in zip(up_in, up_out, config.downsample_factors[::-1])]
        out_w = nx.fan_in_normal(rng, (dims[0], config.input_dim), dims[0])
        out_b = nx.zeros(config.input_dim)
        return cls(config, compressor, latent_w, latent_b, expand_w, expand_b,
                   decompressor, out_w, out_b)

    def named_parameters(self):
        yield from nx.named_parameters(self)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigError(f"state mismatch: missing={missing[:3]} unexpected={unexpected[:3]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != {p.shape}",
                                 dim=name, expected=p.shape, actual=arr.shape)
            p.data = arr.astype(np.float32).copy()
        return self


def pad_to_multiple(features, factor):
    """Right-pad ``[T, D]`` to a multiple of ``factor`` by repeating the last frame."""
    t = features.shape[0]
    extra = (-t) % factor
    if extra == 0:
        return features
    if isinstance(features, nx.Tensor):
        idx = np.concatenate([np.arange(t), np.full(extra, t - 1)])
        return nx.getitem(features, idx)
    return np.concatenate([features, np.repeat(features[-1:], extra, axis=0)], axis=0)


def _check_features(features, config):
    arr = features.data if isinstance(features, nx.Tensor) else np.asarray(features)
    if arr.ndim != 2 or arr.shape[1] != config.input_dim:
        raise ShapeError(f"features must be [T, {config.input_dim}], got {arr.shape}",
                         dim="D", expected=config.input_dim,
                         actual=arr.shape[-1] if arr.ndim else None)
    if arr.shape[0] < 1:
        raise ShapeError("features have no frames", dim="T", actual=0)
    if not np.all(np.isfinite(arr)):
        raise ValueError("features contain NaN or Inf")


def compress(model, features):
    """Continuous latents ``[ceil(T / F), L]`` before quantisation."""
    _check_features(features, model.config)
    x = pad_to_multiple(nx.tensor(features), model.config.total_factor)
    for block in model.compressor:
        x = focal_downscale(x, block)
    return nx.linear(x, model.latent_w, model.latent_b)


def decompress(model, codes):
    """Map quantised codes ``[T', L]`` back to features ``[T' * F, D]``."""
    x = nx.linear(nx.tensor(codes), model.expand_w, model.expand_b)
    for block in model.decompressor:
        x = focal_upscale(x, block)
    return nx.linear(x, model.out_w, model.out_b)


def encode(features, model):
    """Token indices for one utterance of ``[T, input_dim]`` features."""
    features = np.asarray(features, dtype=np.float32)
    with nx.no_grad():
        latents = compress(model, features)
        _, indices = bsq.quantize_ste(latents, strict=True)
    return indices


def check_tokens(tokens, codebook_size):
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise ShapeError(f"tokens must be 1-d, got shape {tokens.shape}", dim="ndim",
                         expected=1, actual=tokens.ndim)
    if tokens.size and not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError("tokens must be integers")
    bad = np.flatnonzero((tokens < 0) | (tokens >= codebook_size))
    if bad.size:
        raise ValueError(f"token {int(tokens[bad[0]])} at position {int(bad[0])} is outside "
                         f"[0, {codebook_size})")
    return tokens.astype(np.int64)


def decode_features(tokens, model):
    """Decompressed 50 Hz features ``[len(tokens) * F, input_dim]``."""
    cfg = model.config
    tokens = check_tokens(tokens, cfg.codebook_size)
    if tokens.size == 0:
        return np.zeros((0, cfg.input_dim), dtype=np.float32)
    codes = bsq.index_to_code(tokens, cfg.latent_dim)
    with nx.no_grad():
        return decompress(model, codes).data


def _unit_rows(x, what):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError(f"{what} contains a zero-norm frame")
    return x / norms


def cosine_similarity(a, b, chunk=256):
    """``[len(a), len(b)]`` cosine similarities.

    Uses elementwise products rather than BLAS so that identical frames yield
    bitwise identical scores (needed for deterministic tie-breaking).
    """
    a = _unit_rows(a, "query")
    b = _unit_rows(b, "reference")
    out = np.empty((a.shape[0], b.shape[0]))
    for start in range(0, a.shape[0], chunk):
        out[start:start + chunk] = np.einsum("td,rd->tr", a[start:start + chunk], b,
                                             optimize=False)
    return out


def knn_convert(source_decoded, reference_pool, k=4):
    """Replace each frame by the mean of its ``k`` most cosine-similar reference frames.

    Ties go to the lower reference index.
    """
    src = np.asarray(source_decoded)
    ref = np.asarray(reference_pool)
    if src.ndim != 2 or ref.ndim != 2 or src.shape[1] != ref.shape[1]:
        raise ShapeError(f"feature dims differ: source {src.shape}, reference {ref.shape}",
                         dim="D")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if ref.shape[0] < k:
        raise ValueError(f"reference pool has {ref.shape[0]} frames, fewer than k={k}")
    sims = cosine_similarity(src, ref)
    nearest = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    out = ref.astype(np.float64)[nearest].mean(axis=1)
    return out.astype(np.float32)

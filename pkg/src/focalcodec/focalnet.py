"""Focal modulation blocks, Snake activation, and focal down/upscaling.

Sequences are laid out time-major, ``x[T, dim]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError
from .numerics import ConvSpec, Tensor

RESAMPLE_KERNEL = 4


@dataclass(frozen=True)
class FocalModulationConfig:
    dim: int
    focal_levels: int = 2
    focal_window: int = 7
    focal_factor: int = 2
    layer_scale_init: float = 1e-4
    mlp_ratio: int = 4
    padding_mode: str = "zeros"

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"dim must be positive, got {self.dim}")
        if self.focal_levels < 1:
            raise ConfigError(f"focal_levels must be >= 1, got {self.focal_levels}")
        if self.focal_window < 1 or self.focal_window % 2 == 0:
            raise ConfigError(f"focal_window must be odd, got {self.focal_window}")
        if self.focal_factor < 1:
            raise ConfigError(f"focal_factor must be >= 1, got {self.focal_factor}")
        if not self.layer_scale_init > 0:
            raise ConfigError(f"layer_scale_init must be > 0, got {self.layer_scale_init}")
        if self.padding_mode not in ("zeros", "circular"):
            raise ConfigError(f"unknown padding_mode {self.padding_mode!r}")

    @property
    def kernel_sizes(self):
        # focal_factor**(l-1) * (window-1) + 1 stays odd for every level
        return [self.focal_factor ** lvl * (self.focal_window - 1) + 1
                for lvl in range(self.focal_levels)]


@dataclass
class FocalBlockParams:
    norm1_gamma: Tensor
    norm1_beta: Tensor
    pre_w: Tensor  # dim -> query | level-0 context | focal_levels+1 gate logits
    pre_b: Tensor
    context_w: list  # one depthwise kernel [dim, 1, k_l] per level
    h_w: Tensor
    h_b: Tensor
    out_w: Tensor
    out_b: Tensor
    layer_scale1: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    layer_scale2: Tensor

    @classmethod
    def init(cls, config, rng):
        d, n_lv = config.dim, config.focal_levels
        hidden = config.mlp_ratio * d
        return cls(
            norm1_gamma=nx.full(d, 1.0),
            norm1_beta=nx.zeros(d),
            pre_w=nx.trunc_normal(rng, (d, 2 * d + n_lv + 1)),
            pre_b=nx.zeros(2 * d + n_lv + 1),
            context_w=[nx.trunc_normal(rng, (d, 1, k)) for k in config.kernel_sizes],
            h_w=nx.trunc_normal(rng, (d, d)),
            h_b=nx.zeros(d),
            out_w=nx.trunc_normal(rng, (d, d)),
            out_b=nx.zeros(d),
            layer_scale1=nx.full(d, config.layer_scale_init),
            norm2_gamma=nx.full(d, 1.0),
            norm2_beta=nx.zeros(d),
            mlp_w1=nx.trunc_normal(rng, (d, hidden)),
            mlp_b1=nx.zeros(hidden),
            mlp_w2=nx.trunc_normal(rng, (hidden, d)),
            mlp_b2=nx.zeros(d),
            layer_scale2=nx.full(d, config.layer_scale_init),
        )


@dataclass
class ScaleBlockParams:
    """Projection (linear or strided / transposed conv) -> Snake -> focal block."""

    proj_w: Tensor
    proj_b: Tensor
    alpha: Tensor
    focal: FocalBlockParams
    factor: int = 1
    direction: str = "down"
    config: FocalModulationConfig = field(default=None, repr=False)

    @classmethod
    def init(cls, d_in, d_out, factor, direction, rng, **focal_kwargs):
        if factor not in (1, 2):
            raise ConfigError(f"scale factor must be 1 or 2, got {factor}")
        if direction not in ("down", "up"):
            raise ConfigError(f"direction must be 'down' or 'up', got {direction!r}")
        if factor == 1:
            w = nx.fan_in_normal(rng, (d_in, d_out), d_in)
        elif direction == "down":
            w = nx.fan_in_normal(rng, (d_out, d_in, RESAMPLE_KERNEL), d_in * RESAMPLE_KERNEL)
        else:
            # each output frame sees kernel/stride taps per input channel
            w = nx.fan_in_normal(rng, (d_in, d_out, RESAMPLE_KERNEL), d_in * RESAMPLE_KERNEL // 2)
        config = FocalModulationConfig(dim=d_out, **focal_kwargs)
        return cls(
            proj_w=w,
            proj_b=nx.zeros(d_out),
            alpha=nx.full(d_out, 1.0),
            focal=FocalBlockParams.init(config, rng),
            factor=factor,
            direction=direction,
            config=config,
        )


def snake(x, alpha):
    """``x + sin(alpha*x)**2 / alpha`` with one ``alpha`` per channel (last axis)."""
    x, alpha = nx.tensor(x), nx.tensor(alpha)
    if np.any(alpha.data <= 0):
        raise ConfigError("Snake alpha must be strictly positive for every channel")
    if alpha.shape != (x.shape[-1],):
        raise ShapeError(f"alpha shape {alpha.shape} does not match channels {x.shape[-1]}",
                         dim="C", expected=x.shape[-1], actual=alpha.shape[-1])
    x64 = x.data.astype(np.float64)
    a64 = alpha.data.astype(np.float64)
    ax = a64 * x64
    s = np.sin(ax)
    out = x64 + s * s / a64
    dtype = np.result_type(x.dtype, alpha.dtype)

    def backward(g):
        g = g.astype(np.float64)
        s2 = np.sin(2.0 * ax)
        gx = (g * (1.0 + s2)).astype(x.dtype) if x.requires_grad else None
        ga = None
        if alpha.requires_grad:
            local = x64 * s2 / a64 - s * s / (a64 * a64)
            ga = (g * local).reshape(-1, x.shape[-1]).sum(axis=0).astype(alpha.dtype)
        return gx, ga

    return nx.custom_op(out.astype(dtype), (x, alpha), backward)


def _depthwise(x, w, padding_mode):
    # x[T, C] -> conv over time -> [T, C]
    spec = ConvSpec(w.shape[2], groups=x.shape[1], padding_mode=padding_mode)
    return nx.transpose(nx.conv1d(nx.transpose(x), w, None, spec))


def focal_modulation(x, params, config):
    """Gate a per-frame query with hierarchically aggregated context.

    Context level 1 is a depthwise conv over the projected input, each further
    level convolves the previous one with a wider kernel, and the last level is
    the time-average of the deepest map.
    """
    x = nx.tensor(x)
    if x.ndim != 2 or x.shape[1] != config.dim:
        raise ShapeError(f"focal_modulation expects [T, {config.dim}], got {x.shape}",
                         dim="dim", expected=config.dim, actual=x.shape[-1])
    d, n_lv = config.dim, config.focal_levels
    pre = nx.linear(x, params.pre_w, params.pre_b)
    query, ctx, gates = nx.split(pre, [d, d, n_lv + 1], axis=-1)
    mixed = None
    for lvl in range(n_lv):
        ctx = nx.gelu(_depthwise(ctx, params.context_w[lvl], config.padding_mode))
        term = ctx * gates[:, lvl:lvl + 1]
        mixed = term if mixed is None else mixed + term
    mixed = mixed + nx.global_avg_pool(ctx) * gates[:, n_lv:n_lv + 1]
    modulator = nx.linear(mixed, params.h_w, params.h_b)
    return nx.linear(query * modulator, params.out_w, params.out_b)


def focal_block(x, params, config):
    """Pre-norm transformer block with focal modulation in place of attention."""
    x = nx.tensor(x)
    y = nx.layer_norm(x, params.norm1_gamma, params.norm1_beta)
    x = x + params.layer_scale1 * focal_modulation(y, params, config)
    y = nx.layer_norm(x, params.norm2_gamma, params.norm2_beta)
    y = nx.linear(nx.gelu(nx.linear(y, params.mlp_w1, params.mlp_b1)), params.mlp_w2, params.mlp_b2)
    return x + params.layer_scale2 * y


def _project(x, params):
    if params.factor == 1:
        return nx.linear(x, params.proj_w, params.proj_b)
    spec = ConvSpec(RESAMPLE_KERNEL, stride=2, transposed=params.direction == "up",
                    padding_mode=params.config.padding_mode)
    return nx.transpose(nx.conv1d(nx.transpose(x), params.proj_w, params.proj_b, spec))


def focal_downscale(x, params):
    """Project ``[T, D_in]`` to ``[T / factor, D_out]``, then Snake and a focal block."""
    x = nx.tensor(x)
    if params.direction != "down":
        raise ConfigError("focal_downscale needs a block built with direction='down'")
    d_in = params.proj_w.shape[0] if params.factor == 1 else params.proj_w.shape[1]
    if x.ndim != 2 or x.shape[1] != d_in:
        raise ShapeError(f"focal_downscale expects [T, {d_in}], got {x.shape}", dim="D_in",
                         expected=d_in, actual=x.shape[-1])
    if params.factor == 2 and x.shape[0] % 2:
        raise ShapeError(f"length {x.shape[0]} is odd; pad the sequence to an even length "
                         "before a factor-2 downscale", dim="T", actual=x.shape[0])
    h = snake(_project(x, params), params.alpha)
    return focal_block(h, params.focal, params.config)


def focal_upscale(x, params):
    """Project ``[T, D_in]`` to ``[T * factor, D_out]``, then Snake and a focal block."""
    x = nx.tensor(x)
    if params.direction != "up":
        raise ConfigError("focal_upscale needs a block built with direction='up'")
    d_in = params.proj_w.shape[0]
    if x.ndim != 2 or x.shape[1] != d_in:
        raise ShapeError(f"focal_upscale expects [T, {d_in}], got {x.shape}", dim="D_in",
                         expected=d_in, actual=x.shape[-1])
    h = snake(_project(x, params), params.alpha)
    return focal_block(h, params.focal, params.config)

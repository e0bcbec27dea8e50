"""Binary spherical quantisation with an implicit 2**L codebook.

A latent ``v`` is projected to the unit sphere and each coordinate is snapped
to ``+-1/sqrt(L)``.  Code ``c`` maps to the integer whose bit ``d`` (bit 0 is
least significant) is set iff ``c[d] > 0``.  That bit order is part of the
token-stream format and must not change.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError

TRAIN_NORM_EPS = 1e-8
CODE_TOL = 1e-6


@dataclass(frozen=True)
class BsqConfig:
    latent_dim: int = 13
    temperature: float = 0.1
    entropy_weight: float = 0.1

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be positive, got {self.latent_dim}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.entropy_weight < 0:
            raise ConfigError(f"entropy_weight must be >= 0, got {self.entropy_weight}")

    @property
    def codebook_size(self):
        return 2 ** self.latent_dim


def project_to_sphere(v, eps=None):
    """Scale each row of ``v`` to unit L2 norm.

    With ``eps=None`` a zero row is an error; with a float the norm is
    computed as ``sqrt(|v|^2 + eps)`` (the training-time guard).
    Accepts arrays or Tensors; Tensors are differentiated exactly.
    """
    if isinstance(v, nx.Tensor):
        return _normalize_rows(v, eps)
    v = np.asarray(v, dtype=np.float64)
    sq = np.sum(v * v, axis=-1, keepdims=True)
    if eps is None:
        if np.any(sq == 0):
            raise ValueError("cannot project a zero latent vector onto the sphere")
        return v / np.sqrt(sq)
    return v / np.sqrt(sq + eps)


def _normalize_rows(v, eps):
    v64 = v.data.astype(np.float64)
    sq = np.sum(v64 * v64, axis=-1, keepdims=True)
    if eps is None and np.any(sq == 0):
        raise ValueError("cannot project a zero latent vector onto the sphere")
    n = np.sqrt(sq if eps is None else sq + eps)
    u = v64 / n

    def backward(g):
        g = g.astype(np.float64)
        # d(v/|v|) = (g - u <u, g>) / |v|; the eps guard only rescales |v|
        gv = (g - (v64 * np.sum(v64 * g, axis=-1, keepdims=True)) / (n * n)) / n
        return (gv.astype(v.dtype),)

    return nx.custom_op(u.astype(v.dtype), (v,), backward)


def binary_quantize(u):
    """``sign(u) / sqrt(L)`` per coordinate, with ``sign(0) = +1``."""
    u = np.asarray(u)
    n_dim = u.shape[-1]
    dtype = u.dtype if u.dtype in (np.float32, np.float64) else np.float64
    scale = dtype.type(1.0 / np.sqrt(n_dim))
    return np.where(u >= 0, scale, -scale).astype(dtype)


class _FrozenState(threading.local):
    recorder = None


_frozen = _FrozenState()


class FrozenQuantization:
    """Replay the straight-through offsets recorded on the first forward pass.

    The straight-through estimator differentiates ``u + stop_grad(q(u) - u)``.
    Inside this context the first pass through every quantiser records
    ``q(u) - u``; later passes reuse it, so the forward map becomes smooth and
    its finite differences match the straight-through gradient.  Use it only
    for gradient checks.
    """

    def __init__(self):
        self.offsets = []
        self._cursor = None

    def __enter__(self):
        self._cursor = 0 if self.offsets else None
        _frozen.recorder = self
        return self

    def __exit__(self, *exc):
        _frozen.recorder = None
        return False

    def _offset(self, u, code):
        if self._cursor is None:
            self.offsets.append(code - u)
            return code - u
        off = self.offsets[self._cursor]
        self._cursor += 1
        return off


def binarize_ste(u):
    """Binarise unit rows ``u`` (a Tensor); the backward pass is the identity."""
    code = binary_quantize(u.data)
    rec = _frozen.recorder
    if rec is not None:
        off = rec._offset(u.data.astype(np.float64), code.astype(np.float64))
        return u + nx.Tensor(off.astype(u.dtype))
    return nx.custom_op(code.astype(u.dtype), (u,), lambda g: (g,))


def quantize_ste(v, strict=True):
    """Quantise the rows of ``v[T, L]``; gradients pass straight through the binarisation.

    Returns ``(codes, indices)`` where ``codes`` is a Tensor of the same shape
    and ``indices`` an int64 array of length ``T``.  ``strict=False`` applies
    the training-time epsilon guard instead of rejecting zero rows.
    """
    v = nx.tensor(v)
    if v.ndim != 2:
        raise ShapeError(f"quantize_ste expects [T, L], got shape {v.shape}", dim="ndim",
                         expected=2, actual=v.ndim)
    if v.shape[0] == 0:
        return nx.Tensor(np.zeros(v.shape, dtype=v.dtype)), np.zeros(0, dtype=np.int64)
    u = project_to_sphere(v, eps=None if strict else TRAIN_NORM_EPS)
    q = binarize_ste(u)
    return q, code_index(binary_quantize(u.data))


def code_index(code):
    """Integer index of each code row (bit ``d`` set iff ``code[..., d] > 0``)."""
    code = np.asarray(code, dtype=np.float64)
    n_dim = code.shape[-1]
    if n_dim > 62:
        raise ConfigError("latent_dim above 62 does not fit an int64 index")
    mag = 1.0 / np.sqrt(n_dim)
    if code.size and np.max(np.abs(np.abs(code) - mag)) > CODE_TOL:
        raise ValueError(f"code components must be +-1/sqrt({n_dim}) within {CODE_TOL}")
    bits = (code > 0).astype(np.int64)
    return bits @ (np.int64(1) << np.arange(n_dim, dtype=np.int64))


def index_to_code(index, latent_dim, dtype=np.float32):
    index = np.asarray(index, dtype=np.int64)
    if np.any(index < 0) or np.any(index >= (1 << latent_dim)):
        bad = int(np.flatnonzero((index < 0) | (index >= (1 << latent_dim)))[0])
        raise ValueError(f"index at position {bad} is outside [0, 2**{latent_dim})")
    bits = (index[..., None] >> np.arange(latent_dim, dtype=np.int64)) & 1
    mag = 1.0 / np.sqrt(latent_dim)
    return np.where(bits == 1, mag, -mag).astype(dtype)


def _batch_mean(x):
    # sums a sorted copy so the result is bitwise independent of row order
    n = x.shape[0]
    out = np.sort(x.data.astype(np.float64), axis=0).sum(axis=0) / n

    def backward(g):
        return (np.broadcast_to(np.asarray(g) / n, x.shape).astype(x.dtype),)

    return nx.custom_op(out.astype(x.dtype), (x,), backward)


_P_CLIP = 1e-12


def _bernoulli_entropy(p):
    p64 = np.clip(p.data.astype(np.float64), _P_CLIP, 1.0 - _P_CLIP)
    out = -(p64 * np.log(p64) + (1.0 - p64) * np.log1p(-p64))

    def backward(g):
        return ((g * (np.log1p(-p64) - np.log(p64))).astype(p.dtype),)

    return nx.custom_op(out.astype(p.dtype), (p,), backward)


def entropy_loss(u_batch, config=None, temperature=None):
    """Factorised LFQ-style entropy penalty, in nats.

    ``mean_n sum_d H(p_nd) - sum_d H(mean_n p_nd)`` with
    ``p_nd = sigmoid(2 u_nd / (sqrt(L) tau))``.  The first term sharpens each
    soft assignment, the second rewards a balanced batch.
    """
    u = nx.tensor(u_batch)
    if u.ndim != 2:
        raise ShapeError(f"entropy_loss expects [N, L], got shape {u.shape}", dim="ndim",
                         expected=2, actual=u.ndim)
    if u.shape[0] == 0:
        raise ValueError("entropy_loss needs at least one row")
    tau = temperature if temperature is not None else (config or BsqConfig()).temperature
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    n_dim = u.shape[1]
    logits = u * (2.0 / (np.sqrt(n_dim) * tau))
    probs = nx.sigmoid(logits)
    # H(sigmoid(a)) = softplus(a) - a * sigmoid(a), finite even when saturated
    per_bit = nx.softplus(logits) - logits * probs
    per_sample = _batch_mean(nx.sum_(per_bit, axis=1, keepdims=True)).sum()
    codebook = nx.sum_(_bernoulli_entropy(_batch_mean(probs)))
    return per_sample - codebook


def codebook_stats(indices, codebook_size):
    """``(code_usage, normalized_entropy)`` of an index sequence."""
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if indices.size == 0:
        raise ValueError("codebook_stats needs at least one index")
    if codebook_size < 2:
        raise ConfigError("codebook_size must be at least 2")
    _, counts = np.unique(indices, return_counts=True)
    p = counts / counts.sum()
    ent = float(-(p * np.log(p)).sum())
    return len(counts) / codebook_size, max(0.0, ent) / float(np.log(codebook_size))

"""Dense float tensors, the kernels the codec needs, and a reverse-mode tape.

Storage is float32 unless a tensor is built from a float64 array, in which
case the whole computation stays in float64 (used by the gradient checks).
Dot products and reductions always accumulate in float64.

The tape is explicit: every op run while grad mode is on records its parents
and a closure mapping the output gradient to parent gradients.  ``backward``
walks the tape once and then releases it.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ShapeError

LAYER_NORM_EPS = 1e-5

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Run forward ops without recording a tape (thread-local)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_array(data):
    arr = np.asarray(data)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """An N-d float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")
    # make ``ndarray <op> Tensor`` fall through to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}",
                             dim="size", expected=1, actual=self.size)
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def tensor(data, requires_grad=False, name=None):
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad, name)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    if like is not None and not isinstance(x, np.ndarray):
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _wrap(b, a)
    b = _wrap(b)
    return _wrap(a, b), b


def custom_op(out, parents, backward_fn):
    """Create an op output and, in grad mode, record it on the tape.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    out = Tensor(out)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _out_dtype(*arrays):
    return np.result_type(*[a.dtype for a in arrays])


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _pair(a, b)
    out = (a.data + b.data).astype(_out_dtype(a.data, b.data), copy=False)
    return custom_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    out = (a.data - b.data).astype(_out_dtype(a.data, b.data), copy=False)
    return custom_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    out = (a.data * b.data).astype(_out_dtype(a.data, b.data), copy=False)
    return custom_op(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = _pair(a, b)
    out = (a.data / b.data).astype(_out_dtype(a.data, b.data), copy=False)
    return custom_op(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape),
                   _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
    )


def neg(a):
    return custom_op(-a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,))


def log(a):
    return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sin(a):
    return custom_op(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def square(a):
    return custom_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# ----------------------------------------------------------------------------
# shape ops and reductions


def reshape(a, shape):
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index):
    def backward(g):
        full = np.zeros_like(a.data, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return custom_op(a.data[index], (a,), backward)


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op(out, tensors, backward)


def split(a, sizes, axis=-1):
    """Split ``a`` along ``axis`` into consecutive pieces of the given sizes."""
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not cover axis of length {a.shape[axis]}",
                         dim=axis, expected=a.shape[axis], actual=sum(sizes))
    ax = axis % a.ndim
    pieces, start = [], 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, start + n)
        pieces.append(getitem(a, tuple(idx)))
        start += n
    return pieces


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return custom_op(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ----------------------------------------------------------------------------
# dense algebra


def matmul(a, b):
    """``a[..., n] @ b[n, m]`` accumulated in float64."""
    a, b = _pair(a, b)
    if b.ndim != 2:
        raise ShapeError(f"matmul expects a 2-d right operand, got shape {b.shape}",
                         dim="rhs.ndim", expected=2, actual=b.ndim)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(
            f"inner dimensions differ: lhs last dim {a.shape[-1]} vs rhs rows {b.shape[0]}",
            dim="inner", expected=b.shape[0], actual=a.shape[-1])
    dtype = _out_dtype(a.data, b.data)
    a64, b64 = a.data.astype(np.float64), b.data.astype(np.float64)
    out = (a64 @ b64).astype(dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        ga = (g64 @ b64.T).astype(a.dtype) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = (a64.reshape(-1, a.shape[-1]).T @ g64.reshape(-1, b.shape[1])).astype(b.dtype)
        return ga, gb

    return custom_op(out, (a, b), backward)


def linear(x, w, b=None):
    """``y = x @ w + b`` along the last axis of ``x``."""
    x, w = _wrap(x), _wrap(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(
            f"linear: input feature dim {x.shape[-1]} does not match weight rows {w.shape[0]}",
            dim="D_in", expected=w.shape[0], actual=x.shape[-1])
    y = matmul(x, w)
    if b is not None:
        b = _wrap(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)",
                             dim="D_out", expected=w.shape[1], actual=b.shape[-1])
        y = add(y, b)
    return y


# ----------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int
    stride: int = 1
    groups: int = 1
    transposed: bool = False
    padding_mode: str = "zeros"

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1 or self.groups < 1:
            raise ShapeError("kernel_size, stride and groups must be positive", dim="spec")
        if self.padding_mode not in ("zeros", "circular"):
            raise ShapeError(f"unknown padding_mode {self.padding_mode!r}", dim="padding_mode")
        if self.stride == 1 and self.kernel_size % 2 == 0:
            raise ShapeError("stride-1 convolution needs an odd kernel for same padding",
                             dim="kernel_size", actual=self.kernel_size)
        if self.transposed and self.kernel_size < self.stride:
            raise ShapeError("transposed kernel must be at least the stride", dim="kernel_size",
                             expected=self.stride, actual=self.kernel_size)


def conv_weight_shape(c_in, c_out, spec):
    if spec.transposed:
        return (c_in, c_out // spec.groups, spec.kernel_size)
    return (c_out, c_in // spec.groups, spec.kernel_size)


def conv1d(x, w, b, spec):
    """1-d (transposed) convolution over ``x[C_in, T]`` with same-style padding.

    Forward: output length ``ceil(T / stride)``.  Transposed: ``T * stride``.
    Weights follow the ``[C_out, C_in/groups, K]`` layout (``[C_in, C_out/groups, K]``
    when transposed).
    """
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 2:
        raise ShapeError(f"conv1d expects x[C_in, T], got shape {x.shape}", dim="x.ndim",
                         expected=2, actual=x.ndim)
    c_in, t_in = x.shape
    k, s, groups = spec.kernel_size, spec.stride, spec.groups
    if w.ndim != 3 or w.shape[2] != k:
        raise ShapeError(f"conv1d weight shape {w.shape} does not match kernel_size {k}",
                         dim="kernel_size", expected=k, actual=w.shape[-1] if w.ndim else None)
    if spec.transposed:
        c_out = w.shape[1] * groups
        if w.shape[0] != c_in:
            raise ShapeError(f"transposed conv weight expects C_in={w.shape[0]}, input has {c_in}",
                             dim="C_in", expected=w.shape[0], actual=c_in)
    else:
        c_out = w.shape[0]
        if w.shape[1] * groups != c_in:
            raise ShapeError(f"conv weight expects C_in={w.shape[1] * groups}, input has {c_in}",
                             dim="C_in", expected=w.shape[1] * groups, actual=c_in)
    if c_in % groups or c_out % groups:
        raise ShapeError(f"groups={groups} must divide C_in={c_in} and C_out={c_out}",
                         dim="groups", expected=groups)
    if b is not None:
        b = _wrap(b)
        if b.shape != (c_out,):
            raise ShapeError(f"conv bias shape {b.shape} != ({c_out},)", dim="C_out",
                             expected=c_out, actual=b.shape[0] if b.ndim else None)
    if t_in < 1:
        raise ShapeError("conv1d input has no frames", dim="T", actual=t_in)

    dtype = _out_dtype(x.data, w.data)
    x64 = np.ascontiguousarray(x.data, dtype=np.float64)
    w64 = w.data.astype(np.float64)
    gi, go = c_in // groups, c_out // groups
    circular = spec.padding_mode == "circular"

    if not spec.transposed:
        t_out = -(-t_in // s)
        total = max((t_out - 1) * s + k - t_in, 0)
        left = total // 2
        idx = np.arange(-left, (t_out - 1) * s + k - left)
        if circular:
            src = idx % t_in
            valid = np.ones_like(idx, dtype=bool)
        else:
            valid = (idx >= 0) & (idx < t_in)
            src = np.clip(idx, 0, t_in - 1)
        xpad = x64[:, src] * valid
        xg = xpad.reshape(groups, gi, -1)
        wg = w64.reshape(groups, go, gi, k)
        span = (t_out - 1) * s + 1
        depthwise = gi == 1 and go == 1
        if depthwise:
            # per-channel taps; in-place multiply-accumulate keeps this memory-bound and linear
            wd = w64[:, 0, :]
            windows = sliding_window_view(xpad, k, axis=1)[:, ::s]
            out = np.einsum("ctk,ck->ct", windows, wd, optimize=False)
        else:
            out = np.zeros((groups, go, t_out))
            for j in range(k):
                out += np.einsum("goi,git->got", wg[:, :, :, j], xg[:, :, j:j + span:s])
            out = out.reshape(c_out, t_out)

        def backward(g):
            gg = g.astype(np.float64).reshape(groups, go, t_out)
            gx = gw = None
            if depthwise and x.requires_grad:
                # scatter the output gradient back onto the padded input, one einsum
                g2 = gg.reshape(c_out, t_out)
                if s > 1:
                    up = np.zeros((c_out, span))
                    up[:, ::s] = g2
                    g2 = up
                gp = np.pad(g2, ((0, 0), (k - 1, xpad.shape[1] - span)))
                gpad = np.einsum("ctk,ck->ct", sliding_window_view(gp, k, axis=1),
                                 wd[:, ::-1], optimize=False)
            elif x.requires_grad:
                gpad = np.zeros_like(xg)
                for j in range(k):
                    gpad[:, :, j:j + span:s] += np.einsum("goi,got->git", wg[:, :, :, j], gg)
                gpad = gpad.reshape(c_in, -1)
            if x.requires_grad:
                gx = np.zeros((c_in, t_in))
                if circular:
                    np.add.at(gx, (slice(None), src), gpad)
                else:
                    # valid source positions are distinct, so plain assignment suffices
                    gx[:, src[valid]] = gpad[:, valid]
                gx = gx.astype(x.dtype)
            if depthwise and w.requires_grad:
                gw = np.einsum("ct,ctk->ck", gg.reshape(c_out, t_out), windows, optimize=False)
                gw = gw.reshape(w.shape).astype(w.dtype)
            elif w.requires_grad:
                gw = np.empty_like(wg)
                for j in range(k):
                    gw[:, :, :, j] = np.einsum("got,git->goi", gg, xg[:, :, j:j + span:s])
                gw = gw.reshape(w.shape).astype(w.dtype)
            gb = g.sum(axis=1) if (b is not None and b.requires_grad) else None
            return gx, gw, gb
    else:
        t_out = t_in * s
        crop = (k - s) // 2
        full = (t_in - 1) * s + k
        pos = np.arange(full) - crop
        if circular:
            dst = pos % t_out
            keep = np.ones(full, dtype=bool)
        else:
            keep = (pos >= 0) & (pos < t_out)
            dst = np.clip(pos, 0, t_out - 1)
        xg = x64.reshape(groups, gi, t_in)
        wg = w64.reshape(groups, gi, go, k)
        span = (t_in - 1) * s + 1
        outfull = np.zeros((groups, go, full))
        for j in range(k):
            outfull[:, :, j:j + span:s] += np.einsum("gio,git->got", wg[:, :, :, j], xg)
        outfull = outfull.reshape(c_out, full)
        if circular:
            out = np.zeros((c_out, t_out))
            np.add.at(out, (slice(None), dst), outfull)
        else:
            out = np.ascontiguousarray(outfull[:, keep])

        def backward(g):
            gfull = (g.astype(np.float64)[:, dst] * keep).reshape(groups, go, full)
            gx = gw = None
            if x.requires_grad:
                gxg = np.zeros_like(xg)
                for j in range(k):
                    gxg += np.einsum("gio,got->git", wg[:, :, :, j], gfull[:, :, j:j + span:s])
                gx = gxg.reshape(c_in, t_in).astype(x.dtype)
            if w.requires_grad:
                gw = np.empty_like(wg)
                for j in range(k):
                    gw[:, :, :, j] = np.einsum("git,got->gio", xg, gfull[:, :, j:j + span:s])
                gw = gw.reshape(w.shape).astype(w.dtype)
            gb = g.sum(axis=1) if (b is not None and b.requires_grad) else None
            return gx, gw, gb

    if b is not None:
        out = out + b.data.astype(np.float64)[:, None]
        parents = (x, w, b)
    else:
        parents = (x, w)
        inner = backward
        backward = lambda g: inner(g)[:2]  # noqa: E731
    return custom_op(out.astype(dtype), parents, backward)


# ----------------------------------------------------------------------------
# normalisation and activations


def layer_norm(x, gamma, beta, eps=LAYER_NORM_EPS):
    """Normalise over the last (channel) axis with learned scale and shift."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm params must have shape ({c},)", dim="C", expected=c,
                         actual=gamma.shape[-1])
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    g64 = gamma.data.astype(np.float64)
    out = xhat * g64 + beta.data
    dtype = _out_dtype(x.data, gamma.data)

    def backward(g):
        g = g.astype(np.float64)
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            gh = g * g64
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            gx = gx.astype(x.dtype)
        ggamma = (g * xhat).sum(axis=lead).astype(gamma.dtype) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead).astype(beta.dtype) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return custom_op(out.astype(dtype), (x, gamma, beta), backward)


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    x64 = x.data.astype(np.float64)
    cdf = 0.5 * (1.0 + erf(x64 * _INV_SQRT2))
    out = (x64 * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x64 * x64)
        return ((g * (cdf + x64 * pdf)).astype(x.dtype),)

    return custom_op(out, (x,), backward)


def sigmoid(x):
    x64 = x.data.astype(np.float64)
    s = np.exp(-np.logaddexp(0.0, -x64))
    return custom_op(s.astype(x.dtype), (x,), lambda g: ((g * s * (1.0 - s)).astype(x.dtype),))


def softplus(x):
    x64 = x.data.astype(np.float64)
    out = np.logaddexp(0.0, x64)
    s = np.exp(-np.logaddexp(0.0, -x64))
    return custom_op(out.astype(x.dtype), (x,), lambda g: ((g * s).astype(x.dtype),))


def global_avg_pool(x):
    """Average ``x[T, C]`` over time, keeping a length-1 time axis."""
    return mean(x, axis=0, keepdims=True)


def norm_and_activation(x, kind, gamma=None, beta=None):
    """Dispatch to one of the named normalisation / activation kernels."""
    x = _wrap(x)
    if kind == "layer_norm":
        c = x.shape[-1]
        gamma = Tensor(np.ones(c, dtype=x.dtype)) if gamma is None else gamma
        beta = Tensor(np.zeros(c, dtype=x.dtype)) if beta is None else beta
        return layer_norm(x, gamma, beta)
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "global_avg_pool":
        return global_avg_pool(x)
    raise ValueError(f"unknown kind {kind!r}")


# ----------------------------------------------------------------------------
# tape


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on the tape.

    The tape is released afterwards; a second call on the same graph raises.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}", dim="size",
                         expected=1, actual=loss.size)
    if loss._consumed:
        raise RuntimeError("backward() already ran on this graph; run a new forward pass first")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    order = _topological_order(loss)
    for node in order:
        if node._consumed:
            raise RuntimeError("graph contains a tensor whose tape was already released")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.asarray(g, dtype=node.dtype).reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._consumed = True
    return loss


# ----------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_check(f, x, eps=1e-4, exclude=None, boundary_margin=None, coords=None):
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Runs in float64.  Returns the max over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``.

    ``exclude`` is a boolean mask of coordinates to skip; ``boundary_margin``
    additionally skips coordinates with ``|x_i| < boundary_margin`` (kinks of
    sign-based ops sit at zero).  ``coords`` restricts the check to a subset of
    flat indices, for large parameter tensors.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-5, 1e-2], got {eps}")
    base = np.array(_wrap(x).data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("f(x) is not finite")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    analytic = analytic.reshape(-1)

    skip = np.zeros(base.size, dtype=bool)
    if exclude is not None:
        skip |= np.asarray(exclude, dtype=bool).reshape(-1)
    if boundary_margin is not None:
        skip |= np.abs(base.reshape(-1)) < boundary_margin
    flat = np.arange(base.size) if coords is None else np.asarray(coords).reshape(-1)

    worst = 0.0
    with no_grad():
        for i in flat:
            if skip[i]:
                continue
            xp = base.copy().reshape(-1)
            xp[i] += eps
            fp = f(Tensor(xp.reshape(base.shape))).data
            xm = base.copy().reshape(-1)
            xm[i] -= eps
            fm = f(Tensor(xm.reshape(base.shape))).data
            if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
                raise FloatingPointError(f"f is not finite near coordinate {i}")
            numeric = float((fp - fm).reshape(-1)[0]) / (2.0 * eps)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst


# ----------------------------------------------------------------------------
# parameter plumbing


def named_parameters(obj, prefix=""):
    """Yield ``(dotted_name, Tensor)`` for every tensor reachable from ``obj``.

    Walks dataclass fields, lists/tuples (indexed) and dicts, in definition order.
    """
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif hasattr(obj, "__dataclass_fields__"):
        for name in obj.__dataclass_fields__:
            yield from named_parameters(getattr(obj, name), f"{prefix}.{name}" if prefix else name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for key, item in obj.items():
            yield from named_parameters(item, f"{prefix}.{key}" if prefix else str(key))


def trunc_normal(rng, shape, std=0.02):
    """Normal draws resampled until they fall within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return Tensor(out.astype(np.float32), requires_grad=True)


def fan_in_normal(rng, shape, fan_in):
    """Truncated normal with std ``1/sqrt(fan_in)`` (variance-preserving projections)."""
    return trunc_normal(rng, shape, std=1.0 / np.sqrt(fan_in))


def zeros(shape):
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def full(shape, value):
    return Tensor(np.full(shape, value, dtype=np.float32), requires_grad=True)
